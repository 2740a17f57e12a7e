"""Minimal reverse-mode autodiff over dense float64 arrays.

A Tape records every primitive op in creation order (which is a valid
topological order); backward() sweeps the tape once in reverse.  Any
NaN/Inf produced by an op raises immediately.  Single-threaded use of a
tape is bit-deterministic; independent tapes are safe on separate threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, NonFiniteError, ShapeError
from .rng import substream

LAYER_NORM_EPS = 1e-5


class Param:
    """A trainable array with a gradient accumulator and a learning-rate group."""

    __slots__ = ("name", "value", "grad", "group")

    def __init__(self, name: str, value: np.ndarray, group: str = "model"):
        if group not in ("model", "per_sup", "cross_attn"):
            raise ConfigurationError(f"unknown parameter group {group!r}")
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.group = group

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape}, group={self.group!r})"


class Tensor:
    """A tape node: array value plus links to its parents."""

    __slots__ = ("data", "tape", "parents", "backward_fn", "param", "op", "index")

    def __init__(self, data, tape, parents=(), backward_fn=None, param=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param
        self.op = op
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive ops; creation order is topological."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def constant(self, data) -> Tensor:
        return Tensor(data, self, op="constant")

    def watch(self, param: Param) -> Tensor:
        """Leaf whose gradient accumulates into the param."""
        return Tensor(param.value, self, param=param, op="param")

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; grads accumulate into Params."""
        if loss.tape is not self:
            raise ContractError("loss was recorded on a different tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.param is not None:
                node.param.grad += g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                acc = grads.get(parent.index)
                # allocate on accumulation: stored arrays may be aliased
                grads[parent.index] = pg if acc is None else acc + pg


def backward(loss: Tensor) -> None:
    loss.tape.backward(loss)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    return tape


def _record(tape, data, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op {op!r}")
    return Tensor(data, tape, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(tape, out, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _record(tape, a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _record(tape, a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _record(tape, a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes (b is 1-d)."""
    tape = _same_tape(x, b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not match input {x.shape}")
    out = x.data + b.data

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _record(tape, out, (x, b), bw, "add_bias")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.tape, x.data * c, (x,), lambda g: (g * c,), "scale")


def affine(x: Tensor, alpha: float, beta: float) -> Tensor:
    """alpha * x + beta elementwise with scalar constants."""
    alpha, beta = float(alpha), float(beta)
    return _record(x.tape, alpha * x.data + beta, (x,), lambda g: (g * alpha,), "affine")


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if len(parts) < 2:
        raise ContractError("concat needs at least two tensors")
    tape = _same_tape(*parts)
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        ok = p.data.ndim == ndim and all(
            i == (axis % ndim) or p.shape[i] == parts[0].shape[i] for i in range(ndim)
        )
        if not ok:
            raise ShapeError(f"concat shapes incompatible: {parts[0].shape} vs {p.shape} on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis % ndim] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis % ndim)
            for i in range(len(parts))
        )

    return _record(tape, out, parts, bw, "concat")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at the kink
    return _record(x.tape, x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _record(x.tape, s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _record(x.tape, t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(x.tape, s, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    tape = _same_tape(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match input {x.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * invstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gg = g * gain.data
        gx = invstd * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _record(tape, out, (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, p: float, mode: str, seed: int = 0) -> Tensor:
    """Inverted dropout; eval mode returns the input tensor unchanged."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ContractError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    keep = substream(seed, "dropout").random(x.shape) >= p
    factor = keep / (1.0 - p)
    return _record(x.tape, x.data * factor, (x,), lambda g: (g * factor,), "dropout")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _record(x.tape, x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x: Tensor, i: int, j: int) -> Tensor:
    out = np.swapaxes(x.data, i, j)
    return _record(x.tape, out, (x,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def take_step(x: Tensor, t: int) -> Tensor:
    """Pick step t along axis 1 of a (B, L, D) tensor."""
    if x.data.ndim != 3:
        raise ShapeError(f"take_step expects a 3-d tensor, got {x.shape}")
    out = x.data[:, t, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, t, :] = g
        return (gx,)

    return _record(x.tape, out, (x,), bw, "take_step")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    tape = _same_tape(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    n = diff.size

    def bw(g):
        coeff = 2.0 * float(g) / n
        return coeff * diff, -coeff * diff

    return _record(tape, out, (pred, target), bw, "mse_loss")


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    excluded: int
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _relu_signs(loss: Tensor) -> np.ndarray:
    """Signs of every ReLU pre-activation on the loss's tape."""
    sigs = [np.sign(node.parents[0].data).ravel() for node in loss.tape.nodes if node.op == "relu"]
    return np.concatenate(sigs) if sigs else np.zeros(0)


def grad_check(
    f,
    params: list[Param],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = None,
    seed: int = 0,
    denom_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar f() against central differences.

    Coordinates whose +/-h probes flip a ReLU pre-activation sign (or graze
    the kink within h) are excluded: the central difference is invalid there.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step size h={h} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(max_rel_err=0.0, checked=0, excluded=0, tol=tol)
    for p in params:
        flat = p.value.ravel()
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            rng = substream(seed, "grad_check", p.name)
            coords = np.sort(rng.choice(flat.size, size=max_coords_per_param, replace=False))
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = f()
            up, sp = float(lp.data), _relu_signs(lp)
            flat[idx] = orig - h
            lm = f()
            um, sm = float(lm.data), _relu_signs(lm)
            flat[idx] = orig
            if sp.shape != sm.shape or np.any(sp != sm) or np.any(sp == 0) or np.any(sm == 0):
                report.excluded += 1
                continue
            numeric = (up - um) / (2.0 * h)
            a = analytic[p.name].ravel()[idx]
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), denom_floor)
            worst = max(worst, rel)
            report.checked += 1
        report.per_param[p.name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
