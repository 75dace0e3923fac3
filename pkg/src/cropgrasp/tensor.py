"""Minimal numpy-backed tensor with reverse-mode differentiation.

Only the handful of operations the detector and grasp regressor need are
provided. Each operation records a backward closure on its output when
recording is enabled and at least one input requires a gradient; inside
:func:`no_grad` nothing is recorded.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    FormatVersionMismatch,
    IoFailure,
    NonFiniteValue,
    NotScalar,
    OddDimension,
    ShapeMismatch,
)

__all__ = [
    "Tensor",
    "no_grad",
    "float64_mode",
    "backward",
    "add",
    "sub",
    "mul",
    "square",
    "tsum",
    "mean",
    "sqrt_clamped",
    "sigmoid",
    "relu",
    "reshape",
    "transpose",
    "conv2d",
    "maxpool2",
    "linear",
    "grad_check",
    "GradCheckReport",
    "encode_hvst",
    "decode_hvst",
    "save_tensor",
    "load_tensor",
]


class _Mode(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.recording = True


_mode = _Mode()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference mode)."""
    prev = _mode.recording
    _mode.recording = False
    try:
        yield
    finally:
        _mode.recording = prev


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Build new tensors in 64-bit floats; used by the gradient checker."""
    prev = _mode.dtype
    _mode.dtype = np.float64
    try:
        yield
    finally:
        _mode.dtype = prev


def default_dtype() -> type:
    return _mode.dtype


class Tensor:
    """Dense float array plus an optional gradient buffer.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` of identical shape; :func:`backward` accumulates into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_mode.dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.op = op
        rec = _mode.recording and any(p.requires_grad for p in parents)
        t.requires_grad = rec
        t._parents = parents if rec else ()
        t._backward = backward_fn if rec else None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a single value")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad and not self._parents:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        t = object.__new__(Tensor)
        t.data, t.grad, t.requires_grad = self.data, None, False
        t._parents, t._backward, t.op = (), None, "detach"
        return t

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = object.__new__(Tensor)
    t.data = np.asarray(x, dtype=_mode.dtype)
    t.grad, t.requires_grad = None, False
    t._parents, t._backward, t.op = (), None, "const"
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every leaf's ``grad``.

    Calling twice without :meth:`Tensor.zero_grad` adds the gradients again.
    """
    if root.data.size != 1:
        raise NotScalar(f"backward needs a single-value root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), _bw, "mul")


def square(x: Tensor) -> Tensor:
    d = x.data

    def _bw(g):
        return (2.0 * d * g,)

    return Tensor._result(d * d, (x,), _bw, "square")


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a % len(shape) for a in ax)
        gg = g
        for a in sorted(ax):
            gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg, shape).copy(),)

    return Tensor._result(np.asarray(x.data.sum(axis=axis)), (x,), _bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) / float(n)


def sqrt_clamped(x: Tensor) -> Tensor:
    """sqrt(max(x, 0)); entries at or below zero get a zero gradient."""
    d = x.data
    pos = d > 0
    out = np.sqrt(np.where(pos, d, 0.0)).astype(d.dtype, copy=False)

    def _bw(g):
        safe = np.where(pos, out, 1.0)
        return (np.where(pos, 0.5 * g / safe, 0.0).astype(d.dtype, copy=False),)

    return Tensor._result(out, (x,), _bw, "sqrt")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = (0.5 * (1.0 + np.tanh(0.5 * d))).astype(d.dtype, copy=False)

    def _bw(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), _bw, "sigmoid")


def relu(x: Tensor) -> Tensor:
    d = x.data
    pos = d > 0
    out = np.where(pos, d, 0).astype(d.dtype, copy=False)

    def _bw(g):
        return (g * pos,)

    return Tensor._result(out, (x,), _bw, "relu")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def _bw(g):
        return (g.reshape(old),)

    return Tensor._result(x.data.reshape(shape), (x,), _bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        return (g.transpose(inv),)

    return Tensor._result(np.ascontiguousarray(x.data.transpose(axes)), (x,), _bw, "transpose")


# ---------------------------------------------------------------- layers


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation over a [C,H,W] or [N,C,H,W] input."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeMismatch(f"conv2d expects [C,H,W] or [N,C,H,W] input, got {x.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeMismatch(f"input has {c} channels, kernels expect {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({o},)")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatch("kernel larger than padded input")
    p, s = padding, stride
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wf = kernels.data.reshape(o, -1)
    out = cols @ wf.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if not batched:
        out = out[0]

    def _bw(g):
        g4 = g if batched else g[None]
        gf = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gf.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = gf.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gf @ wf).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j]
            gx = dxp[:, :, p:p + h, p:p + w]
            if not batched:
                gx = gx[0]
        return gx, gk, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._result(out, parents, _bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes."""
    d = x.data
    if d.ndim < 2:
        raise ShapeMismatch("maxpool2 needs at least two dimensions")
    h, w = d.shape[-2:]
    if h % 2 or w % 2:
        raise OddDimension(f"maxpool2 needs even spatial dims, got {h}x{w}")
    lead = d.shape[:-2]
    flat = np.moveaxis(d.reshape(*lead, h // 2, 2, w // 2, 2), -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def _bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx, g[..., None], axis=-1)
        back = np.moveaxis(gflat.reshape(*lead, h // 2, w // 2, 2, 2), -2, -3)
        return (back.reshape(d.shape),)

    return Tensor._result(out, (x,), _bw, "maxpool2")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """weight @ x + bias for x of shape [N] or a batch [B, N]."""
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.T @ xd if g.ndim == 2 else np.outer(g, xd)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=0) if g.ndim == 2 else g
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, _bw, "linear")


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    per_param: list[float] = field(default_factory=list)
    checked_elements: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def _rel_error(a: np.ndarray, n: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), eps)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6, *,
               max_elements: int | None = None, seed: int = 0, name: str = "fn") -> GradCheckReport:
    """Compare analytic gradients with central finite differences in float64.

    ``fn`` must rebuild the scalar from ``params`` on every call. With
    ``max_elements`` set, a seeded subset of each parameter's entries is
    checked instead of all of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    saved = [(p.data, p.grad) for p in params]
    rng = np.random.default_rng(seed)
    per_param: list[float] = []
    checked = 0
    try:
        with float64_mode():
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = np.zeros_like(p.data)
            out = fn()
            if not np.all(np.isfinite(out.data)):
                raise NonFiniteValue(f"{name} produced a non-finite value")
            backward(out)
            analytic = [p.grad.copy() for p in params]
            with no_grad():
                for p, ga in zip(params, analytic):
                    flat = p.data.reshape(-1)
                    idx = np.arange(flat.size)
                    if max_elements is not None and flat.size > max_elements:
                        idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
                    num = np.empty(idx.size)
                    for k, i in enumerate(idx):
                        orig = flat[i]
                        flat[i] = orig + step
                        fp = fn().data
                        flat[i] = orig - step
                        fm = fn().data
                        flat[i] = orig
                        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                            raise NonFiniteValue(f"{name} produced a non-finite value")
                        num[k] = (float(fp.reshape(())) - float(fm.reshape(()))) / (2.0 * step)
                    err = _rel_error(ga.reshape(-1)[idx], num)
                    per_param.append(float(err.max()) if err.size else 0.0)
                    checked += idx.size
    finally:
        for p, (d, g) in zip(params, saved):
            p.data, p.grad = d, g
    return GradCheckReport(name, max(per_param, default=0.0), per_param, checked)


# ---------------------------------------------------------------- HVST container

HVST_MAGIC = b"HVST"
HVST_VERSION = 1


def encode_hvst(arr: np.ndarray) -> bytes:
    a = np.asarray(arr, dtype="<f4", order="C")
    head = HVST_MAGIC + bytes([HVST_VERSION]) + struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_hvst(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one container starting at ``offset``; returns (array, end offset)."""
    mv = memoryview(buf)
    if len(mv) - offset < 9:
        raise IoFailure("truncated HVST header")
    if bytes(mv[offset:offset + 4]) != HVST_MAGIC:
        raise FormatVersionMismatch("bad HVST magic")
    if mv[offset + 4] != HVST_VERSION:
        raise FormatVersionMismatch(f"unsupported HVST version {mv[offset + 4]}")
    (rank,) = struct.unpack_from("<I", mv, offset + 5)
    pos = offset + 9
    if len(mv) - pos < 4 * rank:
        raise IoFailure("truncated HVST dims")
    dims = struct.unpack_from(f"<{rank}I", mv, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(mv) - pos < 4 * count:
        raise IoFailure("truncated HVST payload")
    arr = np.frombuffer(mv, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("HVST payload contains NaN or Inf")
    return arr, pos + 4 * count


def save_tensor(path, arr) -> None:
    data = arr.data if isinstance(arr, Tensor) else arr
    try:
        with open(path, "wb") as f:
            f.write(encode_hvst(data))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    arr, end = decode_hvst(buf)
    if end != len(buf):
        raise IoFailure(f"{path}: trailing bytes after HVST block")
    return arr
