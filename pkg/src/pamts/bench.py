"""Experiment harness: synthetic data, rho sweeps, ablations, reports.

The synthetic benchmark is an AR(1) channel with occasional level shifts;
every shift is announced one step early by a templated sentence, so text
is genuinely predictive when clean and misleading once perturbed:

    a_t   = phi * a_{t-1} + eps_t,   eps_t ~ N(0, sigma_ar^2)
    mu_t  = mu_{t-1} + delta_t * 1[shift at t],
    x_t   = mu_t + a_t,
    delta = sign * (base + slope * |N(0, 1)|), sign ~ +-1.

Announcement sentences carry the shift's direction and magnitude bucket;
non-shift steps get neutral filler.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import TextualNumericalSeries, chronological_split, make_windows
from .embed import EmbedderConfig, HashEmbedder
from .errors import ConfigurationError, ContractError, PamtsError
from .model import ModelConfig, ModelParams, init_model
from .perturb import STRATEGIES, PerturbationSpec, perturb_window
from .rng import derive_seed, substream
from .train import OptimizerConfig, Sample, evaluate, fit, make_sample

DEFAULT_RHOS = (0.3, 0.5, 0.7, 0.9)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
SWEEP_VARIANTS = ("full", "no_ppm", "no_attn", "unimodal")

WINDOW_SCHEMAS = {"monthly": (8, 4, 6), "weekly": (36, 18, 12), "daily": (96, 48, 48)}


# ---------------------------------------------------------------------------
# synthetic benchmark generator

AR_PHI = 0.55
AR_STD = 0.4
SHIFT_BASE = 2.0
SHIFT_SLOPE = 1.5
SHIFT_GAP = (12, 30)
SHARP_CUTOFF = 3.0

_ANNOUNCE = {
    "who": ("analysts", "officials", "reports"),
    "verb": ("expect", "anticipate", "project"),
    "noun": ("activity", "demand", "output"),
}
_FILLER = {
    "what": ("conditions", "levels", "figures"),
    "verb": ("remain", "stay", "hold"),
    "adj": ("steady", "stable", "flat"),
    "when": ("month", "period"),
}


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n: int = 600
    lookback: int = 8
    horizon: int = 6
    text_signal: float = 1.0  # probability a shift gets announced

    def __post_init__(self):
        if self.n < self.lookback + self.horizon + 20:
            raise ConfigurationError(f"n={self.n} too short for lookback+horizon+20")
        if not 0.0 <= self.text_signal <= 1.0:
            raise ConfigurationError("text_signal must lie in [0, 1]")


def synth_dataset(spec: SynthSpec) -> TextualNumericalSeries:
    """Deterministic level-shift series with one-step-early announcements."""
    rng = substream(spec.seed, "synth")
    n = spec.n

    shift_at = np.zeros(n)
    t = 10
    while t < n:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        shift_at[t] = sign * (SHIFT_BASE + SHIFT_SLOPE * abs(rng.standard_normal()))
        t += int(rng.integers(SHIFT_GAP[0], SHIFT_GAP[1]))

    ar = np.zeros(n)
    for i in range(1, n):
        ar[i] = AR_PHI * ar[i - 1] + rng.standard_normal() * AR_STD
    level = 10.0 + np.cumsum(shift_at)
    values = (level + ar)[:, None]

    texts = []
    for i in range(n):
        upcoming = shift_at[i + 1] if i + 1 < n else 0.0
        announced = upcoming != 0.0 and rng.random() < spec.text_signal
        if announced:
            direction = "rise" if upcoming > 0 else "drop"
            size = "sharp" if abs(upcoming) >= SHARP_CUTOFF else "mild"
            texts.append(
                f"{_pick(rng, _ANNOUNCE['who'])} {_pick(rng, _ANNOUNCE['verb'])} "
                f"a {size} {direction} in {_pick(rng, _ANNOUNCE['noun'])} next period"
            )
        else:
            texts.append(
                f"{_pick(rng, _FILLER['what'])} {_pick(rng, _FILLER['verb'])} "
                f"{_pick(rng, _FILLER['adj'])} this {_pick(rng, _FILLER['when'])}"
            )

    base = dt.date(1980, 1, 1)
    dates = tuple(_add_months(base, i) for i in range(n))
    return TextualNumericalSeries(
        dates=dates,
        values=values,
        texts=tuple(texts),
        freq="monthly",
        columns=("value",),
        target=0,
    )


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def _add_months(base: dt.date, k: int) -> dt.date:
    month = base.month - 1 + k
    return dt.date(base.year + month // 12, month % 12 + 1, 1)


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "synth"
    bundle_path: str | None = None  # aligned-series bundle (JSON)
    synth: SynthSpec | None = None  # generate instead of loading
    freq: str = "monthly"
    lookback: int = 8
    label_len: int = 4
    horizon: int = 6
    stride: int = 1
    rhos: tuple[float, ...] = DEFAULT_RHOS
    strategies: tuple[tuple[str, float], ...] = tuple((s, 1.0 / 3.0) for s in STRATEGIES)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    variants: tuple[str, ...] = ("full",)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    embed: EmbedderConfig = field(default_factory=EmbedderConfig)
    forecaster: str = "gru"
    attn_dim: int = 16
    heads: int = 8
    hidden: int = 64
    prior_weight: float = 0.5
    dropout: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    perturb_eval_only: bool = False
    resample_each_epoch: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        for rho in self.rhos:
            if not 0.0 <= rho <= 1.0:
                raise ConfigurationError(f"rho {rho} outside [0, 1]")
        if self.bundle_path is not None and not Path(self.bundle_path).exists():
            raise ConfigurationError(f"bundle path {self.bundle_path} does not exist")
        if self.bundle_path is None and self.synth is None:
            raise ConfigurationError("config needs either a bundle_path or a synth spec")

    def model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            channels=channels,
            lookback=self.lookback,
            horizon=self.horizon,
            text_dim=self.embed.dim,
            attn_dim=self.attn_dim,
            heads=self.heads,
            hidden=self.hidden,
            forecaster=self.forecaster,
            prior_weight=self.prior_weight,
            dropout=self.dropout,
        )


def load_series(config: ExperimentConfig) -> TextualNumericalSeries:
    if config.synth is not None:
        return synth_dataset(config.synth)
    from .corpus import load_bundle

    return load_bundle(config.bundle_path)


# ---------------------------------------------------------------------------
# metric rows and report tables


@dataclass(frozen=True)
class MetricsRow:
    dataset: str
    variant: str
    rho: float | str
    seed: int | str
    mse: float
    mae: float
    error: str = ""  # non-empty marks a failed cell

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class ReportTable:
    rows: list[MetricsRow] = field(default_factory=list)

    def sorted_rows(self) -> list[MetricsRow]:
        return sorted(self.rows, key=lambda r: (r.dataset, r.variant, str(r.rho), str(r.seed)))

    def avg_rows(self) -> list[MetricsRow]:
        """Per-(dataset, variant) arithmetic means over rho and seeds."""
        groups: dict[tuple[str, str], list[MetricsRow]] = {}
        for row in self.sorted_rows():
            if row.failed:
                continue
            groups.setdefault((row.dataset, row.variant), []).append(row)
        out = []
        for (dataset, variant), rows in sorted(groups.items()):
            out.append(
                MetricsRow(
                    dataset=dataset,
                    variant=variant,
                    rho="avg",
                    seed="all",
                    mse=float(np.mean([r.mse for r in rows])),
                    mae=float(np.mean([r.mae for r in rows])),
                )
            )
        return out

    @property
    def has_failures(self) -> bool:
        return any(r.failed for r in self.rows)


def _format_cell(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def emit_csv(table: ReportTable, path: str | Path) -> None:
    """Fixed header CSV; per-cell rows first, then the Avg rows."""
    import csv

    if not table.rows:
        raise ContractError("cannot emit an empty table")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "variant", "rho", "seed", "mse", "mae"])
        for row in table.sorted_rows() + table.avg_rows():
            writer.writerow(
                [
                    row.dataset,
                    row.variant,
                    _format_cell(row.rho),
                    _format_cell(row.seed),
                    "nan" if row.failed else repr(row.mse),
                    "nan" if row.failed else repr(row.mae),
                ]
            )


def read_csv(path: str | Path) -> ReportTable:
    """Re-ingest an emitted CSV; Avg rows are dropped (recomputed on emit)."""
    import csv

    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["dataset", "variant", "rho", "seed", "mse", "mae"]:
            raise ContractError(f"unexpected CSV header {header}")
        for rec in reader:
            dataset, variant, rho_s, seed_s, mse_s, mae_s = rec
            if rho_s == "avg":
                continue
            rho = rho_s if rho_s == "uni" else float(rho_s)
            seed = seed_s if seed_s == "all" else int(seed_s)
            rows.append(MetricsRow(dataset, variant, rho, seed, float(mse_s), float(mae_s)))
    return ReportTable(rows=rows)


# ---------------------------------------------------------------------------
# dataset views (split -> windows -> perturbed texts -> embeddings)


@dataclass
class CellView:
    """Per-(rho, seed) frozen data view shared by all model variants."""

    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    audit: list[dict]  # JSONL-ready perturbation records
    channels: int


def _prepare_split(windows, offset, spec, embedder, perturb: bool, audit: list[dict]):
    samples = []
    for window in windows:
        widx = offset + window.start
        if perturb and spec.rho > 0:
            texts, records = perturb_window(window.lookback_texts, spec, window_index=widx)
            for rec in records:
                audit.append(
                    {
                        "window": widx,
                        "position": rec.position,
                        "strategy": rec.strategy,
                        "original": rec.original,
                        "perturbed": rec.perturbed,
                    }
                )
        else:
            texts = list(window.lookback_texts)
        samples.append(make_sample(window, embedder.embed_window(texts)))
    return samples


def build_cell_view(
    series: TextualNumericalSeries,
    config: ExperimentConfig,
    rho: float,
    seed: int,
    embedder: HashEmbedder | None = None,
) -> CellView:
    """Split, window, perturb, and embed one sweep cell deterministically."""
    L, T = config.lookback, config.horizon
    train_s, val_s, test_s = chronological_split(series, config.split, min_len=L + T)
    spec = PerturbationSpec(rho=rho, seed=seed, strategies=config.strategies)
    embedder = embedder or HashEmbedder(config.embed)
    audit: list[dict] = []
    offsets = (0, len(train_s), len(train_s) + len(val_s))
    splits = []
    for part, offset, is_eval in ((train_s, offsets[0], False), (val_s, offsets[1], False), (test_s, offsets[2], True)):
        windows = make_windows(part, L, config.label_len, T, config.stride)
        perturb = is_eval or not config.perturb_eval_only
        splits.append(_prepare_split(windows, offset, spec, embedder, perturb, audit))
    return CellView(train=splits[0], val=splits[1], test=splits[2], audit=audit, channels=series.channels)


def write_cell_audit(audit: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in audit:
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# experiment runners


def _make_epoch_view(series, config: ExperimentConfig, rho: float, seed: int, embedder):
    """Training-set provider that redraws perturbations each epoch."""
    train_s, _, _ = chronological_split(series, config.split, min_len=config.lookback + config.horizon)
    windows = make_windows(train_s, config.lookback, config.label_len, config.horizon, config.stride)

    def view(epoch: int) -> list[Sample]:
        spec = PerturbationSpec(rho=rho, seed=derive_seed(seed, "epoch", epoch), strategies=config.strategies)
        return _prepare_split(windows, 0, spec, embedder, perturb=not config.perturb_eval_only, audit=[])

    return view


def _run_cell(
    config: ExperimentConfig,
    view: CellView,
    variant: str,
    seed: int,
    train_view=None,
) -> tuple[float, float, ModelParams]:
    model = init_model(config.model_config(view.channels), seed)
    opt = replace(config.optimizer, seed=seed)
    fit(model, view.train, view.val, opt, freq=config.freq, variant=variant, train_view=train_view)
    mse, mae = evaluate(model, view.test, variant=variant)
    return mse, mae, model


def run_experiment(config: ExperimentConfig) -> ReportTable:
    """Grid over (rho, seed, variant); failures become marked rows, not aborts."""
    series = load_series(config)
    embedder = HashEmbedder(config.embed)
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        (out_dir / "audit").mkdir(parents=True, exist_ok=True)
    table = ReportTable()
    for rho in config.rhos:
        for seed in config.seeds:
            try:
                view = build_cell_view(series, config, rho, seed, embedder)
            except PamtsError as exc:
                for variant in config.variants:
                    table.rows.append(MetricsRow(config.name, variant, rho, seed, math.nan, math.nan, error=str(exc)))
                continue
            train_view = (
                _make_epoch_view(series, config, rho, seed, embedder) if config.resample_each_epoch else None
            )
            for variant in config.variants:
                if out_dir:
                    write_cell_audit(
                        view.audit, out_dir / "audit" / f"{config.name}_{variant}_rho{rho}_seed{seed}.jsonl"
                    )
                try:
                    mse, mae, _ = _run_cell(config, view, variant, seed, train_view)
                    table.rows.append(MetricsRow(config.name, variant, rho, seed, mse, mae))
                except PamtsError as exc:
                    table.rows.append(MetricsRow(config.name, variant, rho, seed, math.nan, math.nan, error=str(exc)))
    return table


def ablation_suite(config: ExperimentConfig) -> ReportTable:
    """Full / no-projector / no-attention on identical perturbed views."""
    return run_experiment(replace(config, variants=("full", "no_ppm", "no_attn")))


# ---------------------------------------------------------------------------
# SVG plotting (self-contained, no plotting dependency)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_plot(table: ReportTable, path: str | Path, metric: str = "mse") -> None:
    """Line chart of the chosen metric vs rho, one polyline per variant."""
    if metric not in ("mse", "mae"):
        raise ContractError(f"metric must be 'mse' or 'mae', got {metric!r}")
    points: dict[str, dict[float, list[float]]] = {}
    for row in table.sorted_rows():
        if row.failed or not isinstance(row.rho, float):
            continue
        points.setdefault(row.variant, {}).setdefault(row.rho, []).append(getattr(row, metric))
    if not points:
        raise ContractError("no plottable rows")

    width, height = 640, 400
    ml, mr, mt, mb = 60, 150, 30, 50
    all_rhos = sorted({r for curves in points.values() for r in curves})
    all_vals = [float(np.mean(v)) for curves in points.values() for v in curves.values()]
    x_lo, x_hi = min(all_rhos), max(all_rhos)
    y_lo, y_hi = min(all_vals), max(all_vals)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.08 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(y):
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
        f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">perturbation ratio</text>',
        f'<text x="16" y="{(mt + height - mb) / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13" transform="rotate(-90 16 {(mt + height - mb) / 2:.1f})">{metric.upper()}</text>',
    ]
    for rho in all_rhos:
        parts.append(
            f'<text x="{sx(rho):.1f}" y="{height - mb + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{rho:g}</text>'
        )
    for frac in (0.0, 0.5, 1.0):
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(
            f'<text x="{ml - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{yv:.3g}</text>'
        )
    for i, (variant, curves) in enumerate(sorted(points.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(r):.2f},{sy(float(np.mean(curves[r]))):.2f}" for r in sorted(curves))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in sorted(curves):
            parts.append(
                f'<circle cx="{sx(r):.2f}" cy="{sy(float(np.mean(curves[r]))):.2f}" r="3" fill="{color}"/>'
            )
        ly = mt + 16 + 18 * i
        parts.append(f'<line x1="{width - mr + 10}" y1="{ly}" x2="{width - mr + 34}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{width - mr + 40}" y="{ly + 4}" font-family="sans-serif" font-size="12">{variant}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")
