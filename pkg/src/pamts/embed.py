"""Deterministic text embeddings.

Stands in for a large pretrained encoder: each token hashes to a fixed
unit vector and texts are average-pooled.  Because plain averaging is
order-blind, the last floor(d/4) coordinates carry a bigram-hash channel
so that token shuffling actually moves the embedding.  Precomputed
encoder outputs can be ingested from CSV when available.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .rng import substream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 12
    seed: int = 0
    pooling: str = "avg"
    source: str = "deterministic_hash"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError(f"embedding dimension must be >= 1, got {self.dim}")
        if self.pooling != "avg":
            raise ConfigurationError(f"only average pooling is supported, got {self.pooling!r}")
        if self.source not in ("deterministic_hash", "precomputed_file"):
            raise ConfigurationError(f"unknown embedding source {self.source!r}")


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokens with leading/trailing punctuation removed."""
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and not raw[start].isalnum():
            start += 1
        while end > start and not raw[end - 1].isalnum():
            end -= 1
        if end > start:
            tokens.append(raw[start:end])
    return tokens


def embed_token(token: str, dim: int, seed: int) -> np.ndarray:
    """Unit-norm vector that is a pure function of (token, dim, seed)."""
    if not token:
        raise ConfigurationError("cannot embed an empty token")
    v = substream(seed, "token", token).standard_normal(dim)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:  # unreachable for standard_normal draws in practice
        v = np.zeros(dim)
        v[0] = 1.0
        return v
    return v / norm


class HashEmbedder:
    """Caches token vectors; embeddings are byte-stable across runs."""

    def __init__(self, config: EmbedderConfig):
        self.config = config
        self._cache: dict[tuple[str, int, int], np.ndarray] = {}

    def _token_vec(self, token: str, dim: int, salt: int) -> np.ndarray:
        key = (token, dim, salt)
        vec = self._cache.get(key)
        if vec is None:
            vec = embed_token(token, dim, self.config.seed + salt)
            self._cache[key] = vec
        return vec

    def embed_text(self, text: str) -> np.ndarray:
        d = self.config.dim
        tokens = tokenize(text)
        if not tokens:
            return np.zeros(d)
        vec = np.mean([self._token_vec(t, d, 0) for t in tokens], axis=0)
        tail = d // 4
        if tail > 0 and len(tokens) >= 2:
            # order channel: bigram hashes blended into the trailing coords
            bigrams = [a + "\x1f" + b for a, b in zip(tokens, tokens[1:])]
            bvec = np.mean([self._token_vec(g, tail, 1) for g in bigrams], axis=0)
            vec = vec.copy()
            vec[d - tail :] = 0.5 * vec[d - tail :] + 0.5 * bvec
            norm = float(np.linalg.norm(vec))
            if norm > 1.0:  # rare; keeps the unit-ball guarantee
                vec = vec / norm
        return vec

    def embed_window(self, texts) -> np.ndarray:
        return np.stack([self.embed_text(t) for t in texts])


def embed_text(text: str, config: EmbedderConfig) -> np.ndarray:
    """One-shot wrapper around HashEmbedder.embed_text."""
    return HashEmbedder(config).embed_text(text)


def load_precomputed(path: str | Path) -> dict[str, np.ndarray]:
    """Read a CSV of (text, d floats) rows keyed by the exact text bytes."""
    table: dict[str, np.ndarray] = {}
    dim: int | None = None
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            text = row[0]
            try:
                vec = np.asarray([float(x) for x in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path} row {rownum}: {exc}") from None
            if vec.size == 0:
                raise FormatError(f"{path} row {rownum}: no embedding values")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FormatError(f"{path} row {rownum}: dimension {vec.size} != {dim}")
            table[text] = vec
    if not table:
        raise FormatError(f"{path}: no embedding rows")
    return table


class PrecomputedEmbedder:
    """Exact-text lookup of stored embeddings; misses fall back to hashing."""

    def __init__(self, table: dict[str, np.ndarray], config: EmbedderConfig):
        dims = {v.size for v in table.values()}
        if len(dims) != 1:
            raise FormatError(f"inconsistent embedding dimensions {sorted(dims)}")
        (dim,) = dims
        if dim != config.dim:
            raise FormatError(f"table dimension {dim} != configured {config.dim}")
        self.table = table
        self.config = config
        self.fallback = HashEmbedder(config)
        self.fallback_count = 0

    def embed_text(self, text: str) -> np.ndarray:
        vec = self.table.get(text)
        if vec is not None:
            return vec
        self.fallback_count += 1
        logger.warning("no precomputed embedding for %r; using hash fallback", text[:60])
        return self.fallback.embed_text(text)

    def embed_window(self, texts) -> np.ndarray:
        return np.stack([self.embed_text(t) for t in texts])


def make_embedder(config: EmbedderConfig, table_path: str | Path | None = None):
    if config.source == "precomputed_file":
        if table_path is None:
            raise ConfigurationError("precomputed_file source needs a table path")
        return PrecomputedEmbedder(load_precomputed(table_path), config)
    return HashEmbedder(config)
