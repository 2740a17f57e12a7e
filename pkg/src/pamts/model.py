"""Perturbation-aware fusion forecaster.

Pipeline per window: a noise projector estimates the corrupt component of
each text embedding, the residual (denoised) embeddings feed a multi-head
cross-attention block queried by the numeric features, the attended text
features are blended with an attention-free value path (fixed prior
weight), concatenated step-wise with the numeric inputs, and decoded by a
GRU or MLP head into the forecast.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tape, Tensor
from .errors import ConfigurationError, ShapeError
from .rng import derive_seed, substream

VARIANTS = ("full", "no_ppm", "no_attn", "unimodal")

INIT_STD = 0.02  # normal initialization


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    lookback: int
    horizon: int
    text_dim: int = 12
    attn_dim: int = 16
    heads: int = 8
    hidden: int = 64
    forecaster: str = "gru"
    prior_weight: float = 0.5
    dropout: float = 0.1

    def __post_init__(self):
        if self.attn_dim % self.heads != 0:
            raise ConfigurationError(f"attn_dim {self.attn_dim} not divisible by {self.heads} heads")
        if self.forecaster not in ("gru", "mlp"):
            raise ConfigurationError(f"forecaster must be 'gru' or 'mlp', got {self.forecaster!r}")
        if not 0.0 <= self.prior_weight <= 1.0:
            raise ConfigurationError(f"prior_weight must lie in [0, 1], got {self.prior_weight}")
        for name in ("channels", "lookback", "horizon", "text_dim", "attn_dim", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @property
    def fused_dim(self) -> int:
        return self.channels + self.attn_dim


class ModelParams:
    """Named parameter set for one model instance."""

    def __init__(self, config: ModelConfig, params: dict[str, Param], seed: int):
        self.config = config
        self.params = params
        self.seed = seed

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def all(self) -> list[Param]:
        return list(self.params.values())

    def group(self, group: str) -> list[Param]:
        return [p for p in self.params.values() if p.group == group]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            self.params[name].value[...] = value


def init_model(config: ModelConfig, seed: int, projector_init: str = "zero") -> ModelParams:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains.

    The projector's output layer starts at zero by default so the denoiser
    is the identity at epoch 0; pass projector_init='normal' to randomize
    it (used by certification fixtures).
    """
    if projector_init not in ("zero", "normal"):
        raise ConfigurationError(f"projector_init must be 'zero' or 'normal', got {projector_init!r}")
    c = config
    d, dm, hid = c.text_dim, c.attn_dim, c.hidden
    out_dim = c.horizon * c.channels

    def normal(name, shape, group):
        value = substream(seed, "init", name).standard_normal(shape) * INIT_STD
        return Param(name, value, group)

    def zeros(name, shape, group):
        return Param(name, np.zeros(shape), group)

    def ones(name, shape, group):
        return Param(name, np.ones(shape), group)

    params: dict[str, Param] = {}

    def register(p: Param):
        params[p.name] = p

    # noise projector: d -> 2d -> d, ReLU + layer norm after the hidden layer
    register(normal("phi.w1", (d, 2 * d), "per_sup"))
    register(zeros("phi.b1", (2 * d,), "per_sup"))
    register(ones("phi.ln_gain", (2 * d,), "per_sup"))
    register(zeros("phi.ln_bias", (2 * d,), "per_sup"))
    if projector_init == "zero":
        register(zeros("phi.w2", (2 * d, d), "per_sup"))
    else:
        register(normal("phi.w2", (2 * d, d), "per_sup"))
    register(zeros("phi.b2", (d,), "per_sup"))

    # cross attention: queries from numeric steps, keys/values from text
    register(normal("attn.wq", (c.channels, dm), "cross_attn"))
    register(zeros("attn.bq", (dm,), "cross_attn"))
    register(normal("attn.wk", (d, dm), "cross_attn"))
    register(zeros("attn.bk", (dm,), "cross_attn"))
    register(normal("attn.wv", (d, dm), "cross_attn"))
    register(zeros("attn.bv", (dm,), "cross_attn"))
    register(normal("attn.wo", (dm, dm), "cross_attn"))
    register(zeros("attn.bo", (dm,), "cross_attn"))

    fused = c.fused_dim
    if c.forecaster == "gru":
        for gate in ("z", "r", "h"):
            register(normal(f"gru.wx{gate}", (fused, hid), "model"))
            register(normal(f"gru.wh{gate}", (hid, hid), "model"))
            register(zeros(f"gru.b{gate}", (hid,), "model"))
        register(normal("head.w", (hid, out_dim), "model"))
        register(zeros("head.b", (out_dim,), "model"))
    else:
        register(normal("mlp.w1", (c.lookback * fused, hid), "model"))
        register(zeros("mlp.b1", (hid,), "model"))
        register(normal("mlp.w2", (hid, out_dim), "model"))
        register(zeros("mlp.b2", (out_dim,), "model"))

    return ModelParams(config, params, seed)


def _affine_last(tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def _phi(tape: Tape, w: dict[str, Tensor], e: Tensor) -> Tensor:
    """Noise projector applied along the last axis (row-wise over steps)."""
    h = ad.relu(_affine_last(tape, e, w["phi.w1"], w["phi.b1"]))
    h = ad.layer_norm(h, w["phi.ln_gain"], w["phi.ln_bias"])
    return _affine_last(tape, h, w["phi.w2"], w["phi.b2"])


def _attention(tape: Tape, w: dict[str, Tensor], cfg: ModelConfig, x: Tensor, etilde: Tensor):
    """Multi-head scaled dot-product; returns (mixed output, value path, weights)."""
    B, L = x.shape[0], x.shape[1]
    dm, H = cfg.attn_dim, cfg.heads
    dh = dm // H
    q = _affine_last(tape, x, w["attn.wq"], w["attn.bq"])
    k = _affine_last(tape, etilde, w["attn.wk"], w["attn.bk"])
    v = _affine_last(tape, etilde, w["attn.wv"], w["attn.bv"])
    qh = ad.swapaxes(ad.reshape(q, (B, L, H, dh)), 1, 2)
    kh = ad.swapaxes(ad.reshape(k, (B, L, H, dh)), 1, 2)
    vh = ad.swapaxes(ad.reshape(v, (B, L, H, dh)), 1, 2)
    scores = ad.scale(ad.matmul(qh, ad.swapaxes(kh, 2, 3)), 1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)  # (B, H, L, L), rows sum to 1
    ctx = ad.matmul(weights, vh)
    merged = ad.reshape(ad.swapaxes(ctx, 1, 2), (B, L, dm))
    mixed = _affine_last(tape, merged, w["attn.wo"], w["attn.bo"])
    return mixed, v, weights


def apply_prior_t(a: Tensor, prior: Tensor, weight: float) -> Tensor:
    """weight * a + (1 - weight) * prior."""
    if not 0.0 <= weight <= 1.0:
        raise ConfigurationError(f"prior weight must lie in [0, 1], got {weight}")
    return ad.add(ad.scale(a, weight), ad.scale(prior, 1.0 - weight))


def _forecast_gru(tape, w, cfg: ModelConfig, fused: Tensor, mode: str, seed: int) -> Tensor:
    B, L = fused.shape[0], fused.shape[1]
    h = tape.constant(np.zeros((B, cfg.hidden)))
    for t in range(L):
        u = ad.take_step(fused, t)
        z = ad.sigmoid(ad.add(_affine_last(tape, u, w["gru.wxz"], w["gru.bz"]), ad.matmul(h, w["gru.whz"])))
        r = ad.sigmoid(ad.add(_affine_last(tape, u, w["gru.wxr"], w["gru.br"]), ad.matmul(h, w["gru.whr"])))
        cand = ad.tanh(
            ad.add(_affine_last(tape, u, w["gru.wxh"], w["gru.bh"]), ad.matmul(ad.mul(r, h), w["gru.whh"]))
        )
        h = ad.add(ad.mul(ad.affine(z, -1.0, 1.0), h), ad.mul(z, cand))
    h = ad.dropout(h, cfg.dropout, mode, derive_seed(seed, "drop_head"))
    out = _affine_last(tape, h, w["head.w"], w["head.b"])
    return ad.reshape(out, (B, cfg.horizon, cfg.channels))


def _forecast_mlp(tape, w, cfg: ModelConfig, fused: Tensor, mode: str, seed: int) -> Tensor:
    B, L = fused.shape[0], fused.shape[1]
    flat = ad.reshape(fused, (B, L * cfg.fused_dim))
    h = ad.relu(_affine_last(tape, flat, w["mlp.w1"], w["mlp.b1"]))
    h = ad.dropout(h, cfg.dropout, mode, derive_seed(seed, "drop_head"))
    out = _affine_last(tape, h, w["mlp.w2"], w["mlp.b2"])
    return ad.reshape(out, (B, cfg.horizon, cfg.channels))


def forward(
    model: ModelParams,
    tape: Tape,
    x: np.ndarray,
    e: np.ndarray,
    mode: str = "eval",
    variant: str = "full",
    dropout_seed: int = 0,
    collect: dict | None = None,
) -> Tensor:
    """Record the full forward pass on the tape; returns (B, T, C) predictions.

    x: normalized lookback (B, L, C); e: text embeddings (B, L, d).
    `collect`, when given, receives intermediate tensors (weights, etilde, ...).
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.channels:
        raise ShapeError(f"x shape {x.shape} incompatible with channels {cfg.channels}")
    if e.ndim != 3 or e.shape[2] != cfg.text_dim:
        raise ShapeError(f"e shape {e.shape} incompatible with text_dim {cfg.text_dim}")
    if x.shape[:2] != e.shape[:2]:
        raise ShapeError(f"x {x.shape} and e {e.shape} disagree on batch/lookback")
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")

    w = {name: tape.watch(p) for name, p in model.params.items()}
    xt = tape.constant(x)
    et = tape.constant(np.zeros_like(e) if variant == "unimodal" else e)

    if variant in ("full", "no_attn", "unimodal"):
        etilde = ad.sub(et, _phi(tape, w, et))
    else:  # no_ppm: raw embeddings pass straight through
        etilde = et

    if variant == "no_attn":
        a = _affine_last(tape, etilde, w["attn.wv"], w["attn.bv"])
    else:
        mixed, v, weights = _attention(tape, w, cfg, xt, etilde)
        a = apply_prior_t(mixed, v, cfg.prior_weight)
        if collect is not None:
            collect["attention_weights"] = weights
    if collect is not None:
        collect["etilde"] = etilde
        collect["text_features"] = a
    a = ad.dropout(a, cfg.dropout, mode, derive_seed(dropout_seed, "drop_attn"))

    fused = ad.concat((xt, a), axis=2)
    if cfg.forecaster == "gru":
        return _forecast_gru(tape, w, cfg, fused, mode, dropout_seed)
    return _forecast_mlp(tape, w, cfg, fused, mode, dropout_seed)


def forward_no_ppm(model, tape, x, e, mode="eval", dropout_seed=0):
    """Ablation: raw embeddings bypass the noise projector."""
    return forward(model, tape, x, e, mode=mode, variant="no_ppm", dropout_seed=dropout_seed)


def forward_no_attn(model, tape, x, e, mode="eval", dropout_seed=0):
    """Ablation: attention replaced by the plain value projection."""
    return forward(model, tape, x, e, mode=mode, variant="no_attn", dropout_seed=dropout_seed)


def predict(model: ModelParams, x: np.ndarray, e: np.ndarray, variant: str = "full") -> np.ndarray:
    """Deterministic eval-mode forward returning a plain array.

    Accepts a single window (L, C) or a batch (B, L, C).
    """
    single = x.ndim == 2
    if single:
        x = x[None]
        e = e[None]
    out = forward(model, Tape(), x, e, mode="eval", variant=variant).data
    return out[0] if single else out


# spec-level single-window wrappers -----------------------------------------


def project_noise(model: ModelParams, e: np.ndarray) -> np.ndarray:
    """Apply the noise projector row-wise to (L, d) or (B, L, d) embeddings."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != model.config.text_dim:
        raise ShapeError(f"embedding dim {e.shape[-1]} != configured {model.config.text_dim}")
    tape = Tape()
    w = {name: tape.watch(p) for name, p in model.params.items()}
    return _phi(tape, w, tape.constant(e)).data.copy()


def denoise(model: ModelParams, e: np.ndarray) -> np.ndarray:
    """Residual embedding e - Phi(e)."""
    return np.asarray(e, dtype=np.float64) - project_noise(model, e)


def cross_attend(model: ModelParams, x_feats: np.ndarray, e_denoised: np.ndarray):
    """Single-window attention: returns ((L, dm) output, (H, L, L) weights).

    Output is the head-merged, output-projected mix (prior blending is a
    separate step; see apply_prior).
    """
    tape = Tape()
    w = {name: tape.watch(p) for name, p in model.params.items()}
    xt = tape.constant(np.asarray(x_feats, dtype=np.float64)[None])
    et = tape.constant(np.asarray(e_denoised, dtype=np.float64)[None])
    mixed, _, weights = _attention(tape, w, model.config, xt, et)
    return mixed.data[0].copy(), weights.data[0].copy()


def apply_prior(a: np.ndarray, prior: np.ndarray, weight: float) -> np.ndarray:
    """weight * a + (1 - weight) * prior on plain arrays."""
    if not 0.0 <= weight <= 1.0:
        raise ConfigurationError(f"prior weight must lie in [0, 1], got {weight}")
    return weight * np.asarray(a, dtype=np.float64) + (1.0 - weight) * np.asarray(prior, dtype=np.float64)


# certification hooks --------------------------------------------------------


def text_features(model: ModelParams, x: np.ndarray, z: np.ndarray, variant: str = "full") -> np.ndarray:
    """The text branch alone: denoised embeddings z -> per-step features.

    Full/unimodal variants mix attention with the prior value path; no_attn
    is the bare value projection.  x is one window (L, C), z one (L, d).
    """
    tape = Tape()
    w = {name: tape.watch(p) for name, p in model.params.items()}
    zt = tape.constant(np.asarray(z, dtype=np.float64)[None])
    if variant == "no_attn":
        return _affine_last(tape, zt, w["attn.wv"], w["attn.bv"]).data[0].copy()
    xt = tape.constant(np.asarray(x, dtype=np.float64)[None])
    mixed, v, _ = _attention(tape, w, model.config, xt, zt)
    return apply_prior_t(mixed, v, model.config.prior_weight).data[0].copy()


def forecast_from_features(model: ModelParams, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Run only the forecaster on fixed numeric input x and text features a."""
    tape = Tape()
    w = {name: tape.watch(p) for name, p in model.params.items()}
    xt = tape.constant(np.asarray(x, dtype=np.float64)[None])
    at = tape.constant(np.asarray(a, dtype=np.float64)[None])
    fused = ad.concat((xt, at), axis=2)
    cfg = model.config
    if cfg.forecaster == "gru":
        out = _forecast_gru(tape, w, cfg, fused, "eval", 0)
    else:
        out = _forecast_mlp(tape, w, cfg, fused, "eval", 0)
    return out.data[0].copy()


def projector_layers(model: ModelParams) -> list[tuple]:
    """Layer description of the noise projector for the product certifier."""
    return [
        ("linear", model["phi.w1"].value),
        ("relu",),
        ("layer_norm", model["phi.ln_gain"].value),
        ("linear", model["phi.w2"].value),
    ]


def forecaster_layers(model: ModelParams) -> list[tuple]:
    """Layer description of the MLP forecaster (GRU has no exact product form)."""
    if model.config.forecaster != "mlp":
        raise ConfigurationError("exact layer description only exists for the MLP forecaster")
    return [
        ("linear", model["mlp.w1"].value),
        ("relu",),
        ("linear", model["mlp.w2"].value),
    ]


# checkpointing ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    """JSON checkpoint; floats serialize via repr so round-trips are bit-exact."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "params": {
            name: {"group": p.group, "shape": list(p.value.shape), "data": p.value.ravel().tolist()}
            for name, p in model.params.items()
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig(**payload["config"])
    params = {
        name: Param(name, np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"]), spec["group"])
        for name, spec in payload["params"].items()
    }
    return ModelParams(config, params, payload["seed"])


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
