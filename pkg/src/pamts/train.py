"""Training loop: grouped Adam, early stopping, deterministic batching."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tape
from .corpus import Window, denormalize, normalize_window
from .errors import ConfigurationError, ContractError, NonFiniteError, TrainingAbort
from .model import ModelParams, forward
from .rng import derive_seed, substream

DEFAULT_BATCH_SIZES = {"monthly": 32, "weekly": 16, "daily": 8}


@dataclass(frozen=True)
class OptimizerConfig:
    lr_model: float = 0.001
    lr_per_sup: float = 0.01
    lr_cross_attn: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 20
    batch_sizes: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_BATCH_SIZES))
    clip_norm: float = 5.0
    seed: int = 0
    shuffle: bool = False

    def __post_init__(self):
        if min(self.lr_model, self.lr_per_sup, self.lr_cross_attn) < 0:
            raise ConfigurationError("learning rates must be nonnegative")
        if self.patience > self.max_epochs:
            raise ConfigurationError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")

    def lr_for(self, group: str) -> float:
        return {"model": self.lr_model, "per_sup": self.lr_per_sup, "cross_attn": self.lr_cross_attn}[group]

    def batch_for(self, freq: str) -> int:
        return self.batch_sizes[freq]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


class Adam:
    """Adaptive-moment updates with per-group learning rates and global clipping."""

    def __init__(self, params: list[Param], config: OptimizerConfig):
        self.params = params
        self.config = config
        self._m = {p.name: np.zeros_like(p.value) for p in params}
        self._v = {p.name: np.zeros_like(p.value) for p in params}
        self._t = 0

    def step(self) -> None:
        cfg = self.config
        if cfg.clip_norm > 0:
            total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params))
            if total > cfg.clip_norm:
                factor = cfg.clip_norm / total
                for p in self.params:
                    p.grad *= factor
        self._t += 1
        bc1 = 1.0 - cfg.beta1**self._t
        bc2 = 1.0 - cfg.beta2**self._t
        for p in self.params:
            lr = cfg.lr_for(p.group)
            m = self._m[p.name]
            v = self._v[p.name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * p.grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * p.grad * p.grad
            if lr == 0.0:
                continue  # frozen group: value must stay byte-identical
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        for p in self.params:
            p.zero_grad()


class EarlyStopper:
    """Stop after `patience` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.streak = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True means training should stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.streak = 0
            return False
        self.streak += 1
        return self.streak >= self.patience


@dataclass(frozen=True)
class Sample:
    """A window prepared for the model: normalized inputs plus raw targets."""

    x: np.ndarray  # (L, C) normalized lookback
    e: np.ndarray  # (L, d) text embeddings
    y_norm: np.ndarray  # (T, C)
    y_raw: np.ndarray  # (T, C)
    stats: tuple[np.ndarray, np.ndarray]


def make_sample(window: Window, embeddings: np.ndarray) -> Sample:
    """Pair a raw window with its lookback text embeddings."""
    if embeddings.shape[0] != window.lookback_values.shape[0]:
        raise ContractError(
            f"embeddings for {embeddings.shape[0]} steps, window has {window.lookback_values.shape[0]}"
        )
    norm = window if window.normalized else normalize_window(window)
    return Sample(
        x=norm.lookback_values,
        e=np.asarray(embeddings, dtype=np.float64),
        y_norm=norm.target_values,
        y_raw=window.target_values if not window.normalized else denormalize(norm.target_values, norm.norm_stats),
        stats=norm.norm_stats,
    )


def _batches(samples: list[Sample], batch_size: int, order: np.ndarray):
    for lo in range(0, len(samples), batch_size):
        idx = order[lo : lo + batch_size]
        yield (
            np.stack([samples[i].x for i in idx]),
            np.stack([samples[i].e for i in idx]),
            np.stack([samples[i].y_norm for i in idx]),
        )


def _epoch_val_loss(model: ModelParams, samples: list[Sample], variant: str, batch_size: int) -> float:
    total, count = 0.0, 0
    order = np.arange(len(samples))
    for xb, eb, yb in _batches(samples, batch_size, order):
        preds = forward(model, Tape(), xb, eb, mode="eval", variant=variant).data
        diff = preds - yb
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def fit(
    model: ModelParams,
    train_samples: list[Sample],
    val_samples: list[Sample],
    config: OptimizerConfig,
    freq: str = "monthly",
    variant: str = "full",
    train_view=None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Minimize MSE on normalized targets; restore the best-validation epoch.

    train_view, when given, is called with the 1-based epoch index and must
    return that epoch's training samples (used to resample perturbations).
    """
    if not train_samples or not val_samples:
        raise ContractError("fit needs non-empty train and validation sets")
    batch_size = config.batch_for(freq)
    optimizer = Adam(model.all(), config)
    stopper = EarlyStopper(config.patience)
    best_state = model.state()
    stats: list[EpochStats] = []

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        samples = train_view(epoch) if train_view is not None else train_samples
        if config.shuffle:
            order = substream(config.seed, "batch_order", epoch).permutation(len(samples))
        else:
            order = np.arange(len(samples))
        total, count = 0.0, 0
        for bidx, (xb, eb, yb) in enumerate(_batches(samples, batch_size, order)):
            tape = Tape()
            try:
                preds = forward(
                    model,
                    tape,
                    xb,
                    eb,
                    mode="train",
                    variant=variant,
                    dropout_seed=derive_seed(config.seed, "dropout", epoch, bidx),
                )
                loss = ad.mse_loss(preds, tape.constant(yb))
                model.zero_grads()
                tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingAbort(f"non-finite values in epoch {epoch}, batch {bidx}: {exc}") from exc
            optimizer.step()
            total += float(loss.data) * yb.size
            count += yb.size
        val_loss = _epoch_val_loss(model, val_samples, variant, batch_size)
        stats.append(EpochStats(epoch, total / count, val_loss, time.perf_counter() - t0))
        improved = val_loss < stopper.best
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = model.state()
        if stop:
            break

    model.load_state(best_state)
    return model, stats


def evaluate(model: ModelParams, samples: list[Sample], variant: str = "full", batch_size: int = 64):
    """(MSE, MAE) on de-normalized predictions over all windows/steps/channels."""
    if not samples:
        raise ContractError("evaluate needs at least one window")
    sq_sums = np.zeros(len(samples))
    abs_sums = np.zeros(len(samples))
    sizes = np.zeros(len(samples))
    order = np.arange(len(samples))
    pos = 0
    for xb, eb, _ in _batches(samples, batch_size, order):
        preds = forward(model, Tape(), xb, eb, mode="eval", variant=variant).data
        for row in range(preds.shape[0]):
            s = samples[order[pos]]
            restored = denormalize(preds[row], s.stats)
            err = restored - s.y_raw
            sq_sums[pos] = float(np.sum(err * err))
            abs_sums[pos] = float(np.sum(np.abs(err)))
            sizes[pos] = err.size
            pos += 1
    total = sizes.sum()
    return float(sq_sums.sum() / total), float(abs_sums.sum() / total)


def stats_to_csv(stats: list[EpochStats], path) -> None:
    """Training log: epoch, train loss, validation loss, wall time."""
    import csv
    from pathlib import Path

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_time"])
        for s in stats:
            writer.writerow([s.epoch, repr(s.train_loss), repr(s.val_loss), repr(s.wall_time)])
