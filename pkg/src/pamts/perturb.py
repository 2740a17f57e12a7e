"""Controlled textual perturbation: phrase insertion, token shuffling,
contradiction injection.

All randomness flows through counter-based streams keyed by
(seed, window index, position), so the transformation applied at a given
position never depends on how many other positions exist or on call order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError
from .rng import derive_seed, substream

STRATEGIES = ("insert_irrelevant", "shuffle_tokens", "inject_contradiction")

# fraction of the token count inserted as irrelevant phrases, floored at one
INSERT_RATE = 0.3


def _read_data(name: str) -> str:
    return resources.files("pamts.data").joinpath(name).read_text(encoding="utf-8")


def default_lexicon() -> tuple[str, ...]:
    """Off-domain filler phrases shipped with the package."""
    return tuple(line for line in _read_data("irrelevant_phrases.txt").splitlines() if line.strip())


@dataclass(frozen=True)
class ContradictionRules:
    """Token antonym pairs plus fallback negation templates."""

    pairs: tuple[tuple[str, str], ...]
    templates: tuple[str, ...]

    def __post_init__(self):
        if not self.templates:
            raise ConfigurationError("contradiction rules need at least one negation template")

    def replacement_for(self, token: str) -> str | None:
        core, _, _ = _split_token(token)
        for trigger, replacement in self.pairs:
            if core == trigger:
                return replacement
        return None


def load_rules(path: str | Path, templates: tuple[str, ...] | None = None) -> ContradictionRules:
    """Read trigger<TAB>replacement lines; templates default to the shipped set."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigurationError(f"{path} line {lineno}: expected trigger<TAB>replacement")
        pairs.append((parts[0].strip(), parts[1].strip()))
    return ContradictionRules(pairs=tuple(pairs), templates=templates or default_templates())


def default_templates() -> tuple[str, ...]:
    return tuple(line for line in _read_data("negation_templates.txt").splitlines() if line.strip())


def default_rules() -> ContradictionRules:
    pairs = tuple(
        tuple(line.split("\t"))
        for line in _read_data("antonym_rules.tsv").splitlines()
        if line.strip()
    )
    return ContradictionRules(pairs=pairs, templates=default_templates())


@dataclass(frozen=True)
class PerturbationSpec:
    """How much to corrupt (rho), with which strategies, under which seed."""

    rho: float
    seed: int
    strategies: tuple[tuple[str, float], ...] = tuple((s, 1.0 / 3.0) for s in STRATEGIES)
    lexicon: tuple[str, ...] = ()
    rules: ContradictionRules | None = None

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.strategies:
            raise ConfigurationError("at least one strategy required")
        names = [s for s, _ in self.strategies]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate strategies in {names}")
        unknown = set(names) - set(STRATEGIES)
        if unknown:
            raise ConfigurationError(f"unknown strategies {sorted(unknown)}")
        weights = [w for _, w in self.strategies]
        if any(w < 0 for w in weights):
            raise ConfigurationError("strategy weights must be nonnegative")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ConfigurationError(f"strategy weights must sum to 1, got {sum(weights)}")
        if dict(self.strategies).get("insert_irrelevant", 0.0) > 0 and not self.lexicon:
            object.__setattr__(self, "lexicon", default_lexicon())
        if dict(self.strategies).get("inject_contradiction", 0.0) > 0 and self.rules is None:
            object.__setattr__(self, "rules", default_rules())


@dataclass(frozen=True)
class PerturbationRecord:
    """Audit entry: what was applied where, with the original kept verbatim."""

    position: int
    strategy: str
    original: str
    perturbed: str


def position_seed(seed: int, window_index: int, position: int) -> int:
    """Seed for everything applied at one lookback position."""
    return derive_seed(seed, "position", window_index, position)


def select_positions(L: int, rho: float, seed: int, window_index: int = 0) -> list[int]:
    """Pick exactly floor(rho*L) distinct positions, uniform without replacement."""
    if L < 1:
        raise ConfigurationError(f"window length must be >= 1, got {L}")
    count = int(rho * L)
    if count == 0:
        return []
    rng = substream(seed, "select", window_index)
    return sorted(int(i) for i in rng.choice(L, size=count, replace=False))


def shuffle_tokens(text: str, seed: int) -> str:
    """Uniformly permute whitespace tokens; short texts pass through."""
    tokens = text.split()
    if len(tokens) < 2:
        return text
    rng = substream(seed, "shuffle")
    order = rng.permutation(len(tokens))
    return " ".join(tokens[i] for i in order)


def insert_irrelevant(text: str, seed: int, lexicon: tuple[str, ...]) -> str:
    """Insert off-domain phrases at random token boundaries.

    The original token sequence survives as a subsequence of the output.
    """
    if not lexicon:
        raise ConfigurationError("insert_irrelevant needs a non-empty lexicon")
    tokens = text.split()
    k = max(1, int(INSERT_RATE * len(tokens)))
    rng = substream(seed, "insert")
    out = list(tokens)
    for _ in range(k):
        phrase = lexicon[int(rng.integers(len(lexicon)))]
        slot = int(rng.integers(len(out) + 1))
        out[slot:slot] = phrase.split()
    return " ".join(out)


def _split_token(token: str) -> tuple[str, str, str]:
    """Split a raw token into (lowercase core, leading punct, trailing punct)."""
    start, end = 0, len(token)
    while start < end and not token[start].isalnum():
        start += 1
    while end > start and not token[end - 1].isalnum():
        end -= 1
    return token[start:end].lower(), token[:start], token[end:]


def inject_contradiction(text: str, seed: int, rules: ContradictionRules) -> str:
    """Flip one antonym-matched token, or append a negation template.

    Empty texts are exempt; any non-empty text comes back changed.
    """
    if not text:
        return text
    tokens = text.split()
    hits = [i for i, tok in enumerate(tokens) if rules.replacement_for(tok) is not None]
    rng = substream(seed, "contradict")
    if hits:
        i = hits[int(rng.integers(len(hits)))]
        core, head, tail = _split_token(tokens[i])
        tokens[i] = head + rules.replacement_for(tokens[i]) + tail
        return " ".join(tokens)
    template = rules.templates[int(rng.integers(len(rules.templates)))]
    return text + " " + template


def _apply_strategy(strategy: str, text: str, seed: int, spec: PerturbationSpec) -> str:
    if strategy == "shuffle_tokens":
        return shuffle_tokens(text, seed)
    if strategy == "insert_irrelevant":
        return insert_irrelevant(text, seed, spec.lexicon)
    if strategy == "inject_contradiction":
        return inject_contradiction(text, seed, spec.rules)
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def perturb_window(
    texts: list[str] | tuple[str, ...],
    spec: PerturbationSpec,
    window_index: int = 0,
) -> tuple[list[str], list[PerturbationRecord]]:
    """Corrupt floor(rho*L) of the window's texts; the rest pass through untouched."""
    L = len(texts)
    selected = select_positions(L, spec.rho, spec.seed, window_index)
    names = [s for s, _ in spec.strategies]
    weights = [w for _, w in spec.strategies]
    out = list(texts)
    records: list[PerturbationRecord] = []
    for pos in selected:
        pseed = position_seed(spec.seed, window_index, pos)
        # strategy choice and strategy randomness both keyed to the position
        u = substream(pseed, "strategy").random()
        acc = 0.0
        strategy = names[-1]
        for name, w in zip(names, weights):
            acc += w
            if u < acc:
                strategy = name
                break
        perturbed = _apply_strategy(strategy, texts[pos], pseed, spec)
        out[pos] = perturbed
        records.append(
            PerturbationRecord(position=pos, strategy=strategy, original=texts[pos], perturbed=perturbed)
        )
    return out, records


def write_audit_log(records: list[PerturbationRecord], path: str | Path) -> None:
    """Append-free JSONL dump of perturbation records."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "position": rec.position,
                        "strategy": rec.strategy,
                        "original": rec.original,
                        "perturbed": rec.perturbed,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
