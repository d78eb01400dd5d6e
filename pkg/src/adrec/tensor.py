"""Dense tensors with reverse-mode automatic differentiation.

numpy supplies the dense storage and vectorized arithmetic; the gradient
machinery lives here. Operations executed while a GradTape is active are
recorded in creation order (which is automatically topological), and
``GradTape.backward`` replays them once, in reverse, accumulating
gradients into every tensor that requires them. With no active tape the
same functions run as plain forward math, which is what inference uses.

Float64 is the default precision; float32 is an opt-in speed mode
(parameters created with dtype=float32 propagate it through every op).
Integer data (item ids, timestep grids, masks) is passed around as plain
numpy arrays, not Tensors.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DataError, NumericError

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive attention-mask value. exp(x) underflows to exactly 0.0 below
# x ~ -745, so masked keys contribute bitwise zero weight after the
# stabilizing max subtraction (the max is always attained at a live key).
MASK_BIAS = -1.0e9

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the finite-value guard run after every forward op."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """A dense n-d float array with an optional gradient accumulator.

    ``grad`` is allocated lazily on first accumulation and mirrors
    ``data``'s shape; it stays None on tensors that never require
    gradients.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class GradTape:
    """Ordered record of recorded operations for one backward pass.

    Recording order is topological by construction (an op's inputs always
    exist before the op runs), so the backward walk is a single reversed
    sweep that visits each recorded op exactly once. Gradients from
    shared subexpressions accumulate by summation.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, output: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._ops.append((output, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and propagate through the recorded ops."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        _accumulate(loss, np.ones_like(loss.data))
        for output, backward in reversed(self._ops):
            if output.grad is not None:
                backward(output.grad)

    def zero_grads(self) -> None:
        """Clear gradients on every recorded intermediate (for a second backward).

        Leaf tensors (parameters) are not op outputs and must be cleared
        by the caller.
        """
        for output, _ in self._ops:
            output.grad = None


_tape_stack: list[GradTape] = []


class no_grad:
    """Context that suspends recording (forward math only)."""

    def __enter__(self):
        _tape_stack.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()


def _active_tape() -> GradTape | None:
    return _tape_stack[-1] if _tape_stack else None


def _as_array(value, like: np.ndarray) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=like.dtype)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _finish(data: np.ndarray, inputs: Sequence, backward, op_name: str) -> Tensor:
    """Wrap an op result, running debug guards and tape recording."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op_name}")
    tape = _active_tape()
    needs = tape is not None and any(
        isinstance(x, Tensor) and x.requires_grad for x in inputs
    )
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a_data = a.data if isinstance(a, Tensor) else None
    b_data = b.data if isinstance(b, Tensor) else None
    ref = a_data if a_data is not None else b_data
    av = a_data if a_data is not None else _as_array(a, ref)
    bv = b_data if b_data is not None else _as_array(b, ref)
    data = av + bv

    def backward(g: np.ndarray) -> None:
        if isinstance(a, Tensor) and a.requires_grad:
            _accumulate(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accumulate(b, _unbroadcast(g, bv.shape))

    return _finish(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a_data = a.data if isinstance(a, Tensor) else None
    b_data = b.data if isinstance(b, Tensor) else None
    ref = a_data if a_data is not None else b_data
    av = a_data if a_data is not None else _as_array(a, ref)
    bv = b_data if b_data is not None else _as_array(b, ref)
    data = av * bv

    def backward(g: np.ndarray) -> None:
        if isinstance(a, Tensor) and a.requires_grad:
            _accumulate(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accumulate(b, _unbroadcast(g * av, bv.shape))

    return _finish(data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast (batched variant)."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {av.shape} @ {bv.shape}")
    try:
        data = np.matmul(av, bv)
    except ValueError as exc:
        raise ValueError(f"matmul batch dimensions disagree: {av.shape} @ {bv.shape}") from exc

    def backward(g: np.ndarray) -> None:
        if isinstance(a, Tensor) and a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(av.swapaxes(-1, -2), g), bv.shape))

    return _finish(data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return _finish(data, (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.data.shape
    data = a.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g.reshape(orig))

    return _finish(data, (a,), backward, "reshape")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _finish(data, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    xv = x.data
    cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
    data = xv * cdf

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
            _accumulate(x, g * (cdf + xv * pdf))

    return _finish(data, (x,), backward, "gelu")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xv = x.data
    sig = 1.0 / (1.0 + np.exp(-xv))
    data = xv * sig

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * (sig * (1.0 + xv * (1.0 - sig))))

    return _finish(data, (x,), backward, "silu")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last dimension."""
    xv = x.data
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(x, p * (g - inner))

    return _finish(p, (x,), backward, "softmax_lastdim")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    if gain.data.shape != x.data.shape[-1:] or bias.data.shape != x.data.shape[-1:]:
        raise ValueError(
            f"layer_norm gain/bias {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim of {x.data.shape}"
        )
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    data = gain.data * xhat + bias.data
    dim = xv.shape[-1]

    def backward(g: np.ndarray) -> None:
        h = g * gain.data
        if x.requires_grad:
            term = h - h.mean(axis=-1, keepdims=True) - xhat * (h * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * term)
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead).reshape(dim))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead).reshape(dim))

    return _finish(data, (x, gain, bias), backward, "layer_norm")


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row-gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise IndexError(f"item id {bad} outside embedding range [0, {rows - 1}]")
    data = table.data[ids]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, g.shape[-1]))

    return _finish(data, (table,), backward, "embedding_gather")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted-scaling dropout; identity when train=False or rate=0."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    data = x.data * keep

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * keep)

    return _finish(data, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target class over unmasked positions.

    logits: (..., N); targets: integer class ids in [0, N); pad_mask: 1 at
    positions that count. Fused log-sum-exp keeps it stable; the softmax is
    recomputed in backward instead of stored.
    """
    xv = logits.data
    targets = np.asarray(targets)
    maskf = np.asarray(pad_mask, dtype=xv.dtype)
    if targets.shape != xv.shape[:-1] or maskf.shape != xv.shape[:-1]:
        raise ValueError(
            f"targets {targets.shape} / mask {maskf.shape} do not match logits {xv.shape}"
        )
    n_valid = maskf.sum()
    if n_valid == 0:
        raise DataError("cross entropy over an all-masked (empty) batch")
    n_classes = xv.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(f"target class outside [0, {n_classes})")
    m = xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(xv - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(xv, targets[..., None], axis=-1)
    per_pos = (lse - picked)[..., 0]
    data = np.asarray((per_pos * maskf).sum() / n_valid)

    def backward(g: np.ndarray) -> None:
        if not logits.requires_grad:
            return
        p = np.exp(xv - lse)
        p[(*np.indices(targets.shape), targets)] -= 1.0
        p *= (maskf / n_valid * g)[..., None]
        _accumulate(logits, p)

    return _finish(data, (logits,), backward, "cross_entropy_from_logits")


def mse(a: Tensor, b: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared difference over unmasked token positions.

    For (..., D) inputs the mean runs over the feature dim and every
    position where pad_mask is 1; pad_mask=None counts all positions.
    """
    av, bv = a.data, (b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.data.dtype))
    if av.shape != bv.shape:
        raise ValueError(f"mse shapes disagree: {av.shape} vs {bv.shape}")
    diff = av - bv
    if pad_mask is None:
        weight = np.asarray(1.0 / av.size, dtype=av.dtype)
    else:
        maskf = np.asarray(pad_mask, dtype=av.dtype)
        if maskf.shape != av.shape[: maskf.ndim]:
            raise ValueError(f"mask {maskf.shape} does not match leading dims of {av.shape}")
        n_valid = maskf.sum() * float(np.prod(av.shape[maskf.ndim :], dtype=float))
        if n_valid == 0:
            raise DataError("mse over an all-masked (empty) batch")
        weight = maskf.reshape(maskf.shape + (1,) * (av.ndim - maskf.ndim)) / n_valid
    data = np.asarray((diff * diff * weight).sum())

    def backward(g: np.ndarray) -> None:
        scaled = 2.0 * diff * weight * g
        if isinstance(a, Tensor) and a.requires_grad:
            _accumulate(a, scaled)
        if isinstance(b, Tensor) and b.requires_grad:
            _accumulate(b, -scaled)

    return _finish(data, (a, b), backward, "mse")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise-mean binary cross entropy on logits (stable fused form)."""
    xv = logits.data
    t = np.asarray(targets, dtype=xv.dtype)
    if t.shape != xv.shape:
        raise ValueError(f"targets {t.shape} do not match logits {xv.shape}")
    # log(1 + e^-|x|) + max(x, 0) - x*t
    data = np.asarray((np.log1p(np.exp(-np.abs(xv))) + np.maximum(xv, 0.0) - xv * t).mean())

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-xv))
            _accumulate(logits, (sig - t) * (g / xv.size))

    return _finish(data, (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
               floor: float = 1e-6) -> float:
    """Max relative error between the tape gradient of f and central differences.

    f must be a deterministic scalar-valued function of x. Relative error
    per element is |a - b| / max(|a|, |b|, floor); the floor bounds the
    blow-up on elements below the finite-difference noise scale
    (~|f| * 1e-16 / step in 64-bit), which cannot be validated tighter.
    """
    x.zero_grad()
    if not x.requires_grad:
        raise ValueError("grad_check needs x.requires_grad=True")
    with GradTape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(x).data)
            flat[i] = orig - step
            f_minus = float(f(x).data)
            flat[i] = orig
            fd_flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    x.zero_grad()
    return float((np.abs(analytic - fd) / denom).max())
