"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

Everything upstream (spiking layers, attention, the Q-network) is built from
the operations in this module.  Values are always float32; float64 appears
only in test oracles.  Gradients are recorded on an explicit :class:`Tape`
that is owned by a single thread; forwards executed without an active tape
(target networks, greedy action selection) record nothing and cost nothing.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "SurrogateSpec",
    "add",
    "sub",
    "mul",
    "neg",
    "add_const",
    "mul_const",
    "div",
    "square",
    "sqrt",
    "matmul",
    "transpose",
    "reshape",
    "stack",
    "repeat_axis0",
    "index_axis0",
    "relu",
    "softmax",
    "heaviside_surrogate",
    "reduce_mean",
    "reduce_sum",
    "mean_all",
    "sum_all",
    "take_actions",
    "linear",
    "layernorm",
    "normalize_affine",
]

NORM_EPS = 1e-5  # denominator floor shared by layernorm / batchnorm


class Tensor:
    """A dense rank-N array of float32 values, row-major.

    ``grad`` is populated by :meth:`Tape.backward` and holds an array of the
    same shape as ``data``.  Tensors are value-semantic: nothing in the
    library mutates ``data`` after construction.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path: trusts that `arr` is float32 and finite
        # (results of ops on validated inputs).
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, where: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"non-finite values in {where}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_ACTIVE = threading.local()


def _tape_stack():
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape():
    """Return the innermost active tape of this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Nodes are appended in execution order, which is already a topological
    order, so the backward pass is a single reverse sweep.  A tape may be
    consumed by :meth:`backward` exactly once; :meth:`reset` makes it
    reusable.  A tape must only ever be used from one thread.
    """

    def __init__(self):
        self._nodes = []
        self._result_ids = set()
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, result: Tensor, backward) -> None:
        self._nodes.append((result, backward))
        self._result_ids.add(id(result))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss``, accumulating into ``.grad`` slots."""
        if self._consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        if id(loss) not in self._result_ids:
            raise UsageError("loss is not a value recorded on this tape")
        if loss.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for result, backward in reversed(self._nodes):
            if result.grad is not None:
                backward(result.grad)

    def reset(self) -> None:
        self._nodes.clear()
        self._result_ids.clear()
        self._consumed = False


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``own=True`` promises that ``g`` is a freshly allocated array no other
    node aliases, letting the first accumulation adopt it without a copy.
    Pass-through backwards (add, reshape, slicing views) must leave ``own``
    false, or two tensors could share one gradient buffer.
    """
    if t.grad is None:
        if own and g.dtype == np.float32 and g.base is None:
            t.grad = g
        else:
            t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad += g


def _record(out: Tensor, backward) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum_ub(t: Tensor, g: np.ndarray, owned: bool) -> None:
    """Unbroadcast ``g`` to t's shape and accumulate; ``owned`` marks ``g``
    as a fresh temporary of this backward call."""
    u = _unbroadcast(g, t.shape)
    _accum(t, u, own=owned or u is not g)


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum_ub(a, g, owned=False)
        if b.requires_grad:
            _accum_ub(b, g, owned=False)

    return _record(out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data - b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum_ub(a, g, owned=False)
        if b.requires_grad:
            _accum_ub(b, -g, owned=True)

    return _record(out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum_ub(a, g * b.data, owned=True)
        if b.requires_grad:
            _accum_ub(b, g * a.data, owned=True)

    return _record(out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data / b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum_ub(a, g / b.data, owned=True)
        if b.requires_grad:
            _accum_ub(b, -g * a.data / (b.data * b.data), owned=True)

    return _record(out, backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor._wrap(-a.data, a.requires_grad)

    def backward(g):
        _accum(a, -g, own=True)

    return _record(out, backward)


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data + np.float32(c), a.requires_grad)

    def backward(g):
        _accum(a, g)

    return _record(out, backward)


def mul_const(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    out = Tensor._wrap(a.data * c32, a.requires_grad)

    def backward(g):
        _accum(a, g * c32, own=True)

    return _record(out, backward)


def square(a: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * a.data, a.requires_grad)

    def backward(g):
        _accum(a, g * (2.0 * a.data), own=True)

    return _record(out, backward)


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = Tensor._wrap(root, a.requires_grad)

    def backward(g):
        _accum(a, g / (2.0 * root), own=True)

    return _record(out, backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0.0), a.requires_grad)

    def backward(g):
        _accum(a, g * (a.data > 0), own=True)

    return _record(out, backward)


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    out = Tensor._wrap(data, a.requires_grad)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor._wrap(a.data.transpose(axes), a.requires_grad)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _record(out, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    req = any(t.requires_grad for t in tensors)
    out = Tensor._wrap(np.stack([t.data for t in tensors], axis=axis), req)

    def backward(g):
        pieces = np.split(g, len(tensors), axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, np.squeeze(piece, axis=axis))

    return _record(out, backward)


def repeat_axis0(a: Tensor, n: int) -> Tensor:
    """Tile ``a`` n times along a new leading axis; backward sums it away."""
    out = Tensor._wrap(np.broadcast_to(a.data, (n,) + a.shape), a.requires_grad)

    def backward(g):
        _accum(a, g.sum(axis=0), own=True)

    return _record(out, backward)


def index_axis0(a: Tensor, i: int) -> Tensor:
    """Slice one entry along axis 0 (used to step through time windows)."""
    out = Tensor._wrap(a.data[i], a.requires_grad)

    def backward(g):
        full = np.zeros_like(a.data)
        full[i] = g
        _accum(a, full, own=True)

    return _record(out, backward)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def reduce_sum(a: Tensor, axis, keepdims: bool = True) -> Tensor:
    axis = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
    out = Tensor._wrap(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        _accum(a, np.broadcast_to(g, a.shape).copy(), own=True)

    return _record(out, backward)


def reduce_mean(a: Tensor, axis, keepdims: bool = True) -> Tensor:
    axis = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
    count = 1
    for ax in axis:
        count *= a.shape[ax]
    inv = np.float32(1.0 / count)
    out = Tensor._wrap(a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32), a.requires_grad)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        _accum(a, np.broadcast_to(g * inv, a.shape).copy(), own=True)

    return _record(out, backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(a.data.sum(dtype=np.float32).reshape(()), a.requires_grad)

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).copy(), own=True)

    return _record(out, backward)


def mean_all(a: Tensor) -> Tensor:
    inv = np.float32(1.0 / a.size)
    out = Tensor._wrap(a.data.mean(dtype=np.float32).reshape(()), a.requires_grad)

    def backward(g):
        _accum(a, np.broadcast_to(g * inv, a.shape).copy(), own=True)

    return _record(out, backward)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def _swap_last2(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    out = Tensor._wrap(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum_ub(a, np.matmul(g, _swap_last2(b.data)), owned=True)
        if b.requires_grad:
            _accum_ub(b, np.matmul(_swap_last2(a.data), g), owned=True)

    return _record(out, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w (+ b)``."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# --------------------------------------------------------------------------
# Convolution (valid padding, no dilation)
# --------------------------------------------------------------------------


def conv_output_size(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    b, c, h, w = x.shape
    ho = conv_output_size(h, kh, sh)
    wo = conv_output_size(w, kw, sw)
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    col = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return np.ascontiguousarray(col), ho, wo


def conv2d(x: Tensor, w: Tensor, stride) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects x[B,Cin,H,W] and w[Cout,Cin,kh,kw]")
    sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if kh > h or kw > wd:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{wd}")

    col, ho, wo = _im2col(x.data, kh, kw, sh, sw)
    ckk = cin * kh * kw
    wmat = w.data.reshape(cout, ckk)
    col2d = col.reshape(b * ho * wo, ckk)
    out_flat = np.matmul(col2d, wmat.T).reshape(b, ho * wo, cout)  # one large GEMM
    out_data = np.ascontiguousarray(out_flat.transpose(0, 2, 1).reshape(b, cout, ho, wo))
    out = Tensor._wrap(out_data, x.requires_grad or w.requires_grad)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        if w.requires_grad:
            dw = np.matmul(gm.T, col2d)
            _accum(w, dw.reshape(w.shape), own=True)
        if x.requires_grad:
            dcol = np.matmul(gm, wmat)  # [B*Ho*Wo, Cin*kh*kw]
            d6 = dcol.reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += d6[:, :, :, :, i, j]
            _accum(x, dx, own=True)

    return _record(out, backward)


# --------------------------------------------------------------------------
# Softmax / normalization
# --------------------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    a.assert_finite("softmax input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(s.astype(np.float32, copy=False), a.requires_grad)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, (g - dot) * s, own=True)

    return _record(out, backward)


def normalize_affine(x: Tensor, gamma: Tensor, beta: Tensor, axes,
                     stats: tuple | None = None, through_stats: bool | None = None,
                     eps: float = NORM_EPS) -> Tensor:
    """Fused ``gamma * (x - mu) / sqrt(var + eps) + beta``.

    With ``stats=None`` the moments are computed over ``axes`` of ``x`` and
    the backward pass differentiates through them (layernorm, training
    batchnorm).  A caller that already computed the batch moments passes
    ``stats=(mu, var)`` with ``through_stats=True``; evaluation batchnorm
    passes running statistics with ``through_stats=False`` so they act as
    constants.  ``gamma``/``beta`` must be shaped to broadcast against ``x``.
    """
    axes = tuple(axes)
    if stats is None:
        mu = x.data.mean(axis=axes, keepdims=True, dtype=np.float32)
        # one-pass moments: values are O(1) post-init, cancellation is benign
        var = np.square(x.data).mean(axis=axes, keepdims=True, dtype=np.float32) - mu * mu
        np.maximum(var, 0.0, out=var)
        through_stats = True
    else:
        mu, var = stats
        if through_stats is None:
            through_stats = False
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xn = (x.data - mu) * inv
    out = Tensor._wrap(xn * gamma.data + beta.data,
                       x.requires_grad or gamma.requires_grad or beta.requires_grad)
    n_red = 1
    for ax in axes:
        n_red *= x.shape[ax]
    inv_n = np.float32(1.0 / n_red)

    def backward(g):
        if beta.requires_grad:
            _accum_ub(beta, g, owned=False)
        if gamma.requires_grad:
            _accum_ub(gamma, g * xn, owned=True)
        if x.requires_grad:
            dxn = g * gamma.data
            if through_stats:
                mean_dxn = dxn.sum(axis=axes, keepdims=True) * inv_n
                mean_dxn_xn = (dxn * xn).sum(axis=axes, keepdims=True) * inv_n
                _accum(x, inv * (dxn - mean_dxn - xn * mean_dxn_xn), own=True)
            else:
                _accum(x, dxn * inv, own=True)

    return _record(out, backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Layer normalization over the last axis, then affine ``gamma * xn + beta``."""
    shape = (1,) * (x.ndim - 1) + (x.shape[-1],)
    return normalize_affine(x, reshape(gamma, shape), reshape(beta, shape),
                            axes=(x.ndim - 1,), eps=eps)


# --------------------------------------------------------------------------
# Indexing for the Q-learning head
# --------------------------------------------------------------------------


def take_actions(q: Tensor, actions: np.ndarray) -> Tensor:
    """Select ``q[i, actions[i]]`` for each batch row."""
    if q.ndim != 2:
        raise DimensionError(f"take_actions expects [B, A] values, got {q.shape}")
    idx = np.asarray(actions, dtype=np.int64)
    rows = np.arange(q.shape[0])
    out = Tensor._wrap(np.ascontiguousarray(q.data[rows, idx]), q.requires_grad)

    def backward(g):
        full = np.zeros_like(q.data)
        full[rows, idx] = g
        _accum(q, full, own=True)

    return _record(out, backward)


# --------------------------------------------------------------------------
# Spike nonlinearity with surrogate derivative
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SurrogateSpec:
    """Configuration of the smooth stand-in derivative for the spike step.

    ``grad(u) = slope / (1 + (pi * slope * u)^2)`` — even, positive, and
    maximal (= slope) at ``u = 0``.
    """

    kind: str = "arctangent"
    slope: float = 2.0

    def __post_init__(self):
        if self.kind != "arctangent":
            raise ConfigError(f"unknown surrogate kind: {self.kind!r}")
        if not self.slope > 0:
            raise ConfigError("surrogate slope must be positive")

    def grad(self, u: np.ndarray) -> np.ndarray:
        z = (math.pi * self.slope) * u
        return np.float32(self.slope) / (1.0 + z * z)


def heaviside_surrogate(u: Tensor, spec: SurrogateSpec) -> Tensor:
    """Forward ``1[u >= 0]``; backward multiplies by the surrogate derivative."""
    out = Tensor._wrap((u.data >= 0).astype(np.float32), u.requires_grad)

    def backward(g):
        _accum(u, g * spec.grad(u.data), own=True)

    return _record(out, backward)
