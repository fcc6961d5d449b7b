"""Dense-tensor numerics with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays of at most 4 dimensions (N, C, H, W by
convention). Every operation records a backward closure; ``backward`` on a
scalar loss walks the graph once in reverse topological order and accumulates
gradients into every reachable tensor with ``requires_grad``. float32 is the
working precision; float64 is supported for finite-difference verification.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, UsageError

# Finite values are an invariant of every forward op; the check can be turned
# off for hot loops that are already covered by the loss-level guard.
_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _checked(data: np.ndarray, opname: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"{opname}: non-finite values in output")
    return data


class Tensor:
    """A dense array plus an optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to 4 dimensions, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, grad={self.grad is not None})"

    # Operator sugar; the named functions below carry the real semantics.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__


def _result(data, parents, backward_fn, opname):
    req = any(p.requires_grad for p in parents)
    return Tensor(_checked(data, opname), requires_grad=req,
                  parents=tuple(parents) if req else (),
                  backward_fn=backward_fn if req else None)


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Repeated calls accumulate into existing ``grad`` buffers; the caller is
    responsible for clearing them between optimization steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    # Iterative post-order walk; graphs can be deeper than Python's recursion
    # limit once refinement iterations are chained.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def _same_shape(x: Tensor, y: Tensor, opname: str) -> None:
    if x.data.shape != y.data.shape:
        raise ShapeError(f"{opname}: shapes {x.data.shape} and {y.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise

def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(g)

    return _result(x.data + y.data, (x, y), bwd, "add")


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "sub")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(-g)

    return _result(x.data - y.data, (x, y), bwd, "sub")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mul")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * y.data)
        if y.requires_grad:
            y.accumulate_grad(g * x.data)

    return _result(x.data * y.data, (x, y), bwd, "mul")


def mul_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return _result(x.data * np.asarray(s, dtype=x.dtype), (x,), bwd, "mul_scalar")


def add_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)

    return _result(x.data + np.asarray(s, dtype=x.dtype), (x,), bwd, "add_scalar")


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant array (no gradient to the constant).

    The constant may broadcast against ``x`` as long as the result keeps x's
    shape; used for loss masks and per-channel scale factors.
    """
    c = np.asarray(c, dtype=x.dtype)
    out = x.data * c
    if out.shape != x.data.shape:
        raise ShapeError(f"mul_const: broadcast changed shape {x.data.shape} -> {out.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _result(out, (x,), bwd, "mul_const")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _result(np.maximum(x.data, 0), (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out))

    return _result(out, (x,), bwd, "sigmoid")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (the one sanctioned broadcast)."""
    if x.data.ndim != 4 or b.data.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"add_bias: x {x.data.shape} vs bias {b.data.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _result(x.data + b.data[None, :, None, None], (x, b), bwd, "add_bias")


# ---------------------------------------------------------------------------
# reductions and normalizations

def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).astype(x.dtype))

    return _result(x.data.sum(dtype=x.dtype).reshape(()), (x,), bwd, "sum_all")


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if x.data.shape[axis] < 1:
        raise ShapeError("softmax_axis: axis extent must be >= 1")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            x.accumulate_grad(out * (g - dot))

    return _result(out, (x,), bwd, "softmax_axis")


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), bwd, "log_softmax_axis")


# ---------------------------------------------------------------------------
# shape manipulation

def concat(xs, axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: need at least one tensor")
    ref = list(xs[0].data.shape)
    for t in xs[1:]:
        s = list(t.data.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: incompatible shapes {xs[0].data.shape} vs {t.data.shape}")
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(np.ascontiguousarray(g[tuple(sl)]))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, bwd, "concat")


def concat_channels(xs) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    return concat(xs, axis=1)


def reshape(x: Tensor, shape) -> Tensor:
    """C-order reshape; gradient reshapes back."""
    shape = tuple(shape)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), bwd, "reshape")


def repeat_batch(x: Tensor, n: int) -> Tensor:
    """Tile a batch-1 NCHW tensor n times along the batch axis.

    The gradient sums over the copies, which is what sharing one feature map
    across many sampled proposals needs.
    """
    if x.data.shape[0] != 1:
        raise ShapeError(f"repeat_batch expects batch 1, got {x.data.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.sum(axis=0, keepdims=True))

    return _result(np.repeat(x.data, n, axis=0), (x,), bwd, "repeat_batch")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[sl] = g
            x.accumulate_grad(full)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), bwd, "narrow")


# ---------------------------------------------------------------------------
# upsampling

def _interp_matrix(n_out: int, n_in: int, mode: str, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix mapping length n_in to n_out."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    if mode == "nearest":
        src = np.minimum((np.arange(n_out) * scale).astype(np.int64), n_in - 1)
        m[np.arange(n_out), src] = 1.0
    elif mode == "bilinear":
        # Half-pixel center alignment.
        pos = (np.arange(n_out) + 0.5) * scale - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.clip(np.floor(pos).astype(np.int64), 0, max(n_in - 2, 0))
        frac = pos - lo
        m[np.arange(n_out), lo] += 1.0 - frac
        m[np.arange(n_out), np.minimum(lo + 1, n_in - 1)] += frac
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return m


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    """Scale the two spatial axes of an NCHW tensor by an integer factor."""
    if x.data.ndim != 4:
        raise ShapeError("upsample expects an NCHW tensor")
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    n, c, h, w = x.data.shape
    my = _interp_matrix(h * factor, h, mode, x.dtype)
    mx = _interp_matrix(w * factor, w, mode, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", my, x.data, mx, optimize=True)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.einsum("oh,ncop,pw->nchw", my, g, mx, optimize=True))

    return _result(out, (x,), bwd, "upsample")
