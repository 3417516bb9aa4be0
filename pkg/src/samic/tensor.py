"""Dense float tensors with tape-based reverse-mode differentiation.

Storage is numpy-backed. Training paths run in float64 so central
finite-difference checks are meaningful; float32 is accepted for
inference-only tensors. Every op validates that its output is finite:
NaN/Inf anywhere is treated as an error state, not a value.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special as _sp
from scipy.ndimage import correlate1d as _correlate1d

DTYPE = np.float64


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional real array, optionally tracked on the autodiff tape.

    ``grad`` is allocated lazily and only ever present on tensors with
    ``requires_grad``. Tape nodes hold references to their parents and a
    backward closure mapping the upstream gradient to per-parent
    gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        arr = np.asarray(data, dtype=dtype)
        if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=DTYPE)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _ensure_finite(arr: np.ndarray) -> None:
    # one cheap reduction; only a non-finite (or overflowing) sum pays
    # for the exact elementwise check
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError("op produced non-finite values")


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Build an op result tensor and record its tape node.

    ``backward_fn(upstream)`` must return one gradient array (or None)
    per parent, each matching that parent's shape. Extension point used
    by the scan, quantizer and SVD modules for hand-written backwards.
    """
    arr = data if (type(data) is np.ndarray and data.dtype == DTYPE) \
        else np.asarray(data, dtype=DTYPE)
    _ensure_finite(arr)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out._backward_done = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the upstream gradient down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- backward driver --------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tape tensor reachable from ``loss``.

    The tape is walked exactly once in reverse construction order. A
    second call on the same loss without rebuilding the graph is an
    error, as is a non-scalar or detached loss.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("loss is detached from the tape")
    if loss._backward_done:
        raise TensorError("backward already ran for this loss; re-run the forward pass")
    loss._backward_done = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is None:
            continue
        gs = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, gs):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise ShapeError(
                    f"backward produced grad {g.shape} for parent {parent.data.shape}")
            parent.accumulate_grad(g)


# -- elementwise arithmetic (broadcasting) -----------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return make_op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return make_op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
    return make_op(ad * bd, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))
    return make_op(ad / bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g
    return make_op(ad @ bd, (a, b), bw)


# -- elementwise nonlinearities ----------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def pow_const(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    ad = a.data

    def bw(g):
        return (g * (s + ad * s * (1.0 - s)),)
    return make_op(ad * s, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)
    s = _sigmoid_np(ad)
    return make_op(out, (a,), lambda g: (g * s,))


def erf(a: Tensor) -> Tensor:
    ad = a.data
    coef = 2.0 / np.sqrt(np.pi)

    def bw(g):
        return (g * coef * np.exp(-ad * ad),)
    return make_op(_sp.erf(ad), (a,), bw)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bw(g):
        return (g * inside,)
    return make_op(out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)
    return make_op(out, (a,), bw)


# -- reductions / reshaping ---------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)
    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)
    return make_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(part)
                     for part in np.split(g, splits, axis=axis))
    return make_op(np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """View of channels [start, stop) along axis 0; backward zero-pads."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"channel slice [{start}, {stop}) out of range {a.shape[0]}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)
    return make_op(a.data[start:stop].copy(), (a,), bw)


def gather_rows(a: Tensor, perm) -> Tensor:
    """out[i] = a[perm[i]] along axis 0; perm must be a bijection on [0, N)."""
    perm = np.asarray(perm, dtype=np.int64)
    n = a.shape[0]
    if perm.shape != (n,):
        raise ShapeError(f"perm length {perm.shape} does not match {n} rows")
    counts = np.bincount(perm, minlength=n)
    if perm.min(initial=0) < 0 or perm.max(initial=-1) >= n or not np.all(counts == 1):
        raise ValueError("perm is not a bijection on [0, N)")

    def bw(g):
        out = np.empty_like(a.data)
        out[perm] = g
        return (out,)
    return make_op(a.data[perm], (a,), bw)


# -- convolution and resampling ------------------------------------------------

def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w] = x
    return out


def _conv_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding, same spatial extents."""
    c, h, w = x.shape
    co, ci, s, _ = k.shape
    if s == 1:
        return (k.reshape(co, ci) @ x.reshape(ci, h * w)).reshape(co, h, w)
    patches = _conv_patches(x, s)                            # (H*W, C*s*s)
    out = k.reshape(co, ci * s * s) @ patches.T
    return out.reshape(co, h, w)


def _conv_patches(x: np.ndarray, s: int) -> np.ndarray:
    c, h, w = x.shape
    xp = _zero_pad(x, s // 2)
    win = sliding_window_view(xp, (s, s), axis=(1, 2))
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * s * s)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           mask: np.ndarray | None = None) -> Tensor:
    """2-D convolution, stride 1, zero padding of width (s-1)/2.

    ``mask`` (binary s-by-s) zeroes kernel taps before application and
    keeps the corresponding kernel gradients at zero. ``bias`` adds one
    value per output channel.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError("conv2d expects input (C,H,W) and kernel (C',C,s,s)")
    co, ci, s, s2 = kernel.shape
    if s != s2 or s % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {s}x{s2}")
    if ci != x.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape[0]}, kernel {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError("bias needs one entry per output channel")
    if mask is not None:
        mask = np.asarray(mask, dtype=DTYPE)
        if mask.shape != (s, s):
            raise ShapeError("mask must match the kernel spatial extent")
        keff = kernel.data * mask
    else:
        keff = kernel.data
    xd = x.data
    out = _conv_raw(xd, keff)
    if bias is not None:
        out += bias.data[:, None, None]
    c, h, w = xd.shape

    def bw(g):
        if s == 1:
            gk = (g.reshape(co, h * w) @ xd.reshape(ci, h * w).T
                  ).reshape(co, ci, 1, 1)
            gx = (keff.reshape(co, ci).T @ g.reshape(co, h * w)
                  ).reshape(ci, h, w)
        else:
            gk = (g.reshape(co, h * w) @ _conv_patches(xd, s)
                  ).reshape(co, ci, s, s)
            kt = keff.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            gx = _conv_raw(g, np.ascontiguousarray(kt))
        if mask is not None:
            gk = gk * mask
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(1, 2))
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, bw)


def subsample2x(a: Tensor) -> Tensor:
    """Keep every second row/column (stride-2 sampling, phase 0)."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:, ::2, ::2] = g
        return (out,)
    return make_op(np.ascontiguousarray(a.data[:, ::2, ::2]), (a,), bw)


def upsample_nearest2x(a: Tensor) -> Tensor:
    c, h, w = a.shape

    def bw(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)
    return make_op(np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2), (a,), bw)


def avgpool2x2(a: Tensor) -> Tensor:
    c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError("avgpool2x2 needs even spatial extents")
    out = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)
    return make_op(out, (a,), bw)


def blur2d(a: Tensor, taps: np.ndarray) -> Tensor:
    """Separable symmetric blur along the two spatial axes, zero padded.

    The taps must be symmetric so the op is self-adjoint and backward
    can reuse the same filtering.
    """
    taps = np.asarray(taps, dtype=DTYPE)
    if not np.allclose(taps, taps[::-1]):
        raise ValueError("blur taps must be symmetric")

    def run(arr):
        tmp = _correlate1d(arr, taps, axis=1, mode="constant", cval=0.0)
        return _correlate1d(tmp, taps, axis=2, mode="constant", cval=0.0)

    return make_op(run(a.data), (a,), lambda g: (run(g),))


# -- serialization -------------------------------------------------------------

def write_tensor(stream: BinaryIO, data: np.ndarray) -> None:
    """Rank and extents as little-endian u32, then flat little-endian f32."""
    arr = np.asarray(data)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.astype("<f4").tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    rank_raw = stream.read(4)
    if len(rank_raw) != 4:
        raise TensorError("truncated tensor header")
    rank = struct.unpack("<I", rank_raw)[0]
    shape = struct.unpack(f"<{rank}I", stream.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(DTYPE)


def params_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    return float(np.sqrt(total))
