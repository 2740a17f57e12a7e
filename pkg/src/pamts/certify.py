"""Numerical robustness certificates.

Two instruments:

* Lipschitz certification of the forecaster's sensitivity to text
  embeddings, composed as L_total = L_fore * L_attn * (1 + L_phi).
  Linear/ReLU/layer-norm chains get exact spectral-norm products; the
  attention block (not globally Lipschitz) gets a bounded-domain empirical
  estimate with a safety factor.
* A Monte-Carlo check that subtracting a projection onto a known noise
  subspace reduces expected squared prediction error, with the
  bias/variance decomposition reported explicitly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import LAYER_NORM_EPS
from .errors import CertificationError, ContractError, EstimationError
from .model import (
    ModelParams,
    forecaster_layers,
    forecast_from_features,
    predict,
    project_noise,
    projector_layers,
    text_features,
)
from .rng import substream

ATTENTION_SAFETY = 1.5  # multiplier on empirical bounded-domain estimates


def spectral_norm(matrix: np.ndarray, tol: float = 1e-10, max_iter: int = 10000) -> float:
    """Largest singular value via block power iteration on M^T M.

    A 2-column block with Rayleigh-Ritz extraction keeps convergence healthy
    when the top two singular values nearly tie.  Raises EstimationError if
    the estimate has not stagnated to relative `tol` within max_iter sweeps.
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2:
        raise ContractError(f"spectral_norm expects a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ContractError("spectral_norm requires finite entries")
    if M.size == 0 or not M.any():
        return 0.0
    n = M.shape[1]
    block = min(2, n)
    V = substream(0, "spectral_norm", M.shape[0], n).standard_normal((n, block))
    V, _ = np.linalg.qr(V)
    prev = -1.0
    stable = 0
    for iteration in range(1, max_iter + 1):
        Z = M.T @ (M @ V)
        H = V.T @ Z  # Rayleigh-Ritz projection of M^T M
        top = float(np.max(np.linalg.eigvalsh((H + H.T) / 2.0)))
        sigma = float(np.sqrt(max(top, 0.0)))
        norms = np.linalg.norm(Z, axis=0)
        if np.all(norms < 1e-300):
            return 0.0
        V, _ = np.linalg.qr(Z)
        if prev >= 0 and abs(sigma - prev) <= tol * max(sigma, 1e-300):
            stable += 1
            if stable >= 3:
                return sigma
        else:
            stable = 0
        prev = sigma
    raise EstimationError(f"spectral norm did not converge in {max_iter} iterations")


def lipschitz_mlp(layers: list[tuple], ln_variance_floor: float = 0.0) -> float:
    """Product of per-layer constants for a linear/ReLU/layer-norm chain.

    layer-norm uses the global Jacobian bound 2*max|gain|/sqrt(floor+eps);
    with floor 0 this is sound on all of R^n (the map is not globally
    Lipschitz through its variance, but the eps inside the square root caps
    the blow-up).  Pass an observed variance floor for a tighter
    bounded-domain constant.
    """
    total = 1.0
    for layer in layers:
        kind = layer[0]
        if kind == "linear":
            total *= spectral_norm(layer[1])
        elif kind == "relu":
            total *= 1.0
        elif kind == "layer_norm":
            gain = np.asarray(layer[1], dtype=np.float64)
            total *= 2.0 * float(np.max(np.abs(gain))) / np.sqrt(ln_variance_floor + LAYER_NORM_EPS)
        else:
            raise CertificationError(f"unsupported layer kind {kind!r}")
    return total


def combine_bound(l_fore: float, l_attn: float, l_phi: float) -> float:
    """L_total = L_fore * L_attn * (1 + L_phi)."""
    if min(l_fore, l_attn, l_phi) < 0:
        raise ContractError(f"constants must be nonnegative, got {(l_fore, l_attn, l_phi)}")
    return l_fore * l_attn * (1.0 + l_phi)


def _ball_points(shape: tuple[int, ...], radius: float, rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform draws from the Frobenius-norm ball of the given radius."""
    size = int(np.prod(shape))
    g = rng.standard_normal((count, size))
    g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    r = radius * rng.random(count) ** (1.0 / size)
    return (g * r[:, None]).reshape((count,) + shape)


def _max_ratio(fn, shape, radius: float, pairs: int, seed: int) -> float:
    """Max output/input distance ratio over sampled pairs within the ball.

    Half the pairs are independent draws, half are tight local pairs, which
    probe the Jacobian where ratios usually peak.
    """
    rng = substream(seed, "pairs")
    n_local = pairs // 2
    n_far = pairs - n_local
    best = 0.0
    a = _ball_points(shape, radius, rng, n_far)
    b = _ball_points(shape, radius, rng, n_far)
    for u, v in zip(a, b):
        du = np.linalg.norm(u - v)
        if du < 1e-12:
            continue
        best = max(best, float(np.linalg.norm(fn(u) - fn(v)) / du))
    base = _ball_points(shape, radius * 0.95, rng, n_local)
    steps = rng.standard_normal((n_local,) + shape)
    for u, step in zip(base, steps):
        step = step / max(np.linalg.norm(step), 1e-300) * (radius * 1e-4)
        v = u + step
        du = np.linalg.norm(u - v)
        best = max(best, float(np.linalg.norm(fn(u) - fn(v)) / du))
    return best


def lipschitz_attention(
    model: ModelParams,
    x_fixture: np.ndarray,
    radius: float,
    samples: int = 1000,
    seed: int = 0,
    variant: str = "full",
) -> float:
    """Bounded-domain estimate for the text branch (attention + prior path).

    Max sampled ratio over denoised-embedding pairs within ||z||_F <= radius,
    scaled by the safety factor.  Dot-product attention is not globally
    Lipschitz, so a domain radius is part of the statement.
    """
    if radius <= 0:
        raise ContractError(f"radius must be positive, got {radius}")
    L, d = x_fixture.shape[0], model.config.text_dim
    ratio = _max_ratio(
        lambda z: text_features(model, x_fixture, z, variant=variant),
        (L, d),
        radius,
        samples,
        seed,
    )
    return ATTENTION_SAFETY * ratio


def lipschitz_forecaster_empirical(
    model: ModelParams,
    x_fixture: np.ndarray,
    radius: float,
    samples: int = 1000,
    seed: int = 0,
) -> float:
    """Bounded-domain estimate for the forecaster's sensitivity to text features."""
    L, dm = x_fixture.shape[0], model.config.attn_dim
    ratio = _max_ratio(
        lambda a: forecast_from_features(model, x_fixture, a),
        (L, dm),
        radius,
        samples,
        seed,
    )
    return ATTENTION_SAFETY * ratio


def empirical_lipschitz(fn, x_fixture, e_shape: tuple[int, ...], radius: float, pairs: int, seed: int = 0) -> float:
    """Max ratio ||fn(x,e)-fn(x,e')|| / ||e-e'|| over sampled embedding pairs."""
    if pairs < 1:
        raise ContractError("need at least one pair")
    return _max_ratio(lambda e: np.asarray(fn(x_fixture, e), dtype=np.float64).ravel(), tuple(e_shape), radius, pairs, seed)


@dataclass(frozen=True)
class LipschitzCertificate:
    l_phi: float
    l_attn: float
    l_fore: float
    l_total: float
    domain_radius: float
    softmax_constant: float
    method: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("global_product", "bounded_domain_empirical"):
            raise ContractError(f"unknown method tag {self.method!r}")
        if min(self.l_phi, self.l_attn, self.l_fore) < 0:
            raise ContractError("certificate components must be nonnegative")
        expected = combine_bound(self.l_fore, self.l_attn, self.l_phi)
        if self.l_total != expected:
            raise ContractError(f"l_total {self.l_total} != combined bound {expected}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def certify_model(
    model: ModelParams,
    x_fixture: np.ndarray,
    radius: float,
    samples: int = 1000,
    seed: int = 0,
    softmax_constant: float = 1.0,
    provenance: dict | None = None,
) -> LipschitzCertificate:
    """Certificate for the full model's sensitivity to embeddings within
    ||e||_F <= radius, for the given single-window numeric fixture.

    The projector bound is a global spectral-norm product.  The attention
    branch is estimated on the induced denoised-embedding domain.  The MLP
    forecaster gets an exact product bound; the GRU falls back to a
    bounded-domain estimate on the text-feature domain.
    """
    L = x_fixture.shape[0]
    l_phi = lipschitz_mlp(projector_layers(model))
    phi_at_zero = float(np.linalg.norm(project_noise(model, np.zeros((L, model.config.text_dim)))))
    z_radius = radius * (1.0 + l_phi) + phi_at_zero
    l_attn = lipschitz_attention(model, x_fixture, z_radius, samples=samples, seed=seed)
    if model.config.forecaster == "mlp":
        l_fore = lipschitz_mlp(forecaster_layers(model))
    else:
        a_probe = text_features(model, x_fixture, np.zeros((L, model.config.text_dim)))
        a_radius = (float(np.linalg.norm(a_probe)) + l_attn * z_radius) * 1.1
        l_fore = lipschitz_forecaster_empirical(model, x_fixture, a_radius, samples=samples, seed=seed + 1)
    info = {
        "samples": samples,
        "seed": seed,
        "attention_safety": ATTENTION_SAFETY,
        "z_radius": z_radius,
        "forecaster": model.config.forecaster,
    }
    if provenance:
        info.update(provenance)
    return LipschitzCertificate(
        l_phi=l_phi,
        l_attn=l_attn,
        l_fore=l_fore,
        l_total=combine_bound(l_fore, l_attn, l_phi),
        domain_radius=radius,
        softmax_constant=softmax_constant,
        method="bounded_domain_empirical",
        provenance=info,
    )


def certificate_holds(model: ModelParams, cert: LipschitzCertificate, x_fixture, pairs: int = 10000, seed: int = 1) -> bool:
    """Empirically probe the certificate: sampled ratios must stay below L_total."""
    L, d = x_fixture.shape[0], model.config.text_dim
    observed = empirical_lipschitz(
        lambda x, e: predict(model, x, e),
        x_fixture,
        (L, d),
        cert.domain_radius,
        pairs,
        seed=seed,
    )
    return observed <= cert.l_total


# ---------------------------------------------------------------------------
# signal/noise decomposition and the denoising error-reduction check


@dataclass(frozen=True)
class SignalNoiseModel:
    """Orthonormal signal/noise split of the embedding space."""

    signal_basis: np.ndarray  # (d, k_s)
    noise_basis: np.ndarray  # (d, k_n)
    sigma: float

    def __post_init__(self):
        d = self.signal_basis.shape[0]
        stacked = np.hstack([self.signal_basis, self.noise_basis])
        gram = stacked.T @ stacked
        if not np.allclose(gram, np.eye(stacked.shape[1]), atol=1e-10):
            raise ContractError("signal and noise bases must be mutually orthonormal")
        if self.noise_basis.shape[0] != d:
            raise ContractError("bases must share the ambient dimension")
        if self.sigma < 0:
            raise ContractError("sigma must be nonnegative")

    @property
    def dim(self) -> int:
        return self.signal_basis.shape[0]


def make_signal_noise_model(dim: int, noise_dim: int, sigma: float, seed: int = 0) -> SignalNoiseModel:
    """Random orthonormal split: (dim - noise_dim) signal + noise_dim noise directions."""
    if not 0 < noise_dim < dim:
        raise ContractError(f"noise_dim must lie in (0, {dim}), got {noise_dim}")
    q, _ = np.linalg.qr(substream(seed, "signal_noise_basis").standard_normal((dim, dim)))
    return SignalNoiseModel(signal_basis=q[:, : dim - noise_dim], noise_basis=q[:, dim - noise_dim :], sigma=sigma)


class OrthogonalProjector:
    """Exact projection onto the noise subspace: e -> B_n B_n^T e."""

    def __init__(self, noise_basis: np.ndarray):
        gram = noise_basis.T @ noise_basis
        if not np.allclose(gram, np.eye(noise_basis.shape[1]), atol=1e-10):
            raise ContractError("noise basis must be orthonormal")
        self.matrix = noise_basis @ noise_basis.T

    def __call__(self, e: np.ndarray) -> np.ndarray:
        return np.asarray(e, dtype=np.float64) @ self.matrix  # symmetric, so row convention works


def oracle_projector(noise_model: SignalNoiseModel) -> OrthogonalProjector:
    return OrthogonalProjector(noise_model.noise_basis)


def bias_variance(samples: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """(bias^2, variance, total) of sample vectors around a target.

    total is computed directly from the samples, so
    total == bias^2 + variance is a genuine identity check, exact on
    empirical moments up to rounding.
    """
    Z = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if Z.shape[0] < 2:
        raise ContractError(f"need at least 2 samples, got {Z.shape[0]}")
    y = np.asarray(y, dtype=np.float64).ravel()
    center = Z.mean(axis=0)
    bias_sq = float(np.sum((center - y) ** 2))
    variance = float(np.mean(np.sum((Z - center) ** 2, axis=1)))
    total = float(np.mean(np.sum((Z - y) ** 2, axis=1)))
    return bias_sq, variance, total


@dataclass(frozen=True)
class Prop2Report:
    """Raw-vs-denoised loss comparison under a known noise model."""

    mean_raw: float
    mean_denoised: float
    margin: float
    trials: int
    sigma: float
    bias_raw: float
    variance_raw: float
    bias_denoised: float
    variance_denoised: float
    mean_eta_sq: float  # measured E||eta||^2, eta = e - e_denoised
    mean_shift: float  # measured gap between E[f(e)] and E[f(e_denoised)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def verify_prop2(
    forecaster,
    noise_model: SignalNoiseModel,
    phi="oracle",
    trials: int = 100_000,
    seed: int = 0,
    obs_noise_std: float = 0.1,
) -> Prop2Report:
    """Monte-Carlo comparison of expected squared loss with raw vs denoised
    embeddings.

    Per trial: e = e_signal + B_n beta with beta ~ N(0, sigma^2 I); the
    target is a fixed linear function of the signal component plus
    observation noise.  `forecaster` maps an (n, d) batch to (n, k)
    predictions; phi is 'oracle' (exact projection) or a callable giving
    the estimated noise component of each embedding row.
    """
    if trials < 100:
        raise ContractError(f"need at least 100 trials, got {trials}")
    d = noise_model.dim
    k_n = noise_model.noise_basis.shape[1]
    alpha = substream(seed, "signal_coeff").standard_normal(noise_model.signal_basis.shape[1])
    e_signal = noise_model.signal_basis @ alpha

    probe = np.asarray(forecaster(e_signal[None]))
    out_dim = probe.shape[1]
    target_map = substream(seed, "target_map").standard_normal((d, out_dim)) / np.sqrt(d)
    y_clean = e_signal @ target_map

    rng = substream(seed, "trials")
    beta = rng.standard_normal((trials, k_n)) * noise_model.sigma
    E = e_signal[None, :] + beta @ noise_model.noise_basis.T
    eps = rng.standard_normal((trials, out_dim)) * obs_noise_std
    Y = y_clean[None, :] + eps

    if phi == "oracle":
        noise_est = oracle_projector(noise_model)(E)
    elif callable(phi):
        noise_est = np.asarray(phi(E), dtype=np.float64)
    else:
        raise ContractError(f"phi must be 'oracle' or a callable, got {phi!r}")
    E_den = E - noise_est
    eta = E - E_den

    Z_raw = np.asarray(forecaster(E), dtype=np.float64)
    Z_den = np.asarray(forecaster(E_den), dtype=np.float64)
    loss_raw = float(np.mean(np.sum((Z_raw - Y) ** 2, axis=1)))
    loss_den = float(np.mean(np.sum((Z_den - Y) ** 2, axis=1)))

    bias_raw, var_raw, _ = bias_variance(Z_raw, y_clean)
    bias_den, var_den, _ = bias_variance(Z_den, y_clean)

    return Prop2Report(
        mean_raw=loss_raw,
        mean_denoised=loss_den,
        margin=loss_raw - loss_den,
        trials=trials,
        sigma=noise_model.sigma,
        bias_raw=bias_raw,
        variance_raw=var_raw,
        bias_denoised=bias_den,
        variance_denoised=var_den,
        mean_eta_sq=float(np.mean(np.sum(eta * eta, axis=1))),
        mean_shift=float(np.linalg.norm(Z_raw.mean(axis=0) - Z_den.mean(axis=0))),
    )


class LinearForecaster:
    """f(e) = e W + b; its text Lipschitz constant is exactly sigma_max(W)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(self.weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)

    def __call__(self, e: np.ndarray) -> np.ndarray:
        return np.asarray(e, dtype=np.float64) @ self.weight + self.bias

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.svd(self.weight, compute_uv=False)[0])


def make_noise_sensitive_forecaster(
    noise_model: SignalNoiseModel, out_dim: int = 3, seed: int = 0, noise_gain: float = 1.0
) -> LinearForecaster:
    """Linear forecaster reading both signal and (scaled) noise coordinates."""
    k_s = noise_model.signal_basis.shape[1]
    k_n = noise_model.noise_basis.shape[1]
    gs = substream(seed, "fore_signal").standard_normal((k_s, out_dim))
    gn = substream(seed, "fore_noise").standard_normal((k_n, out_dim)) * noise_gain
    weight = noise_model.signal_basis @ gs + noise_model.noise_basis @ gn
    return LinearForecaster(weight)
