"""Reverse-mode automatic differentiation over dense numpy buffers.

A :class:`Tensor` wraps a float32 or float64 numpy array. Differentiable ops
record their parent tensors plus a closure that turns the output gradient into
parent gradient contributions; :func:`backward` replays those closures once in
reverse topological order, so every node of the graph is visited exactly once.

There is deliberately no general broadcasting. Binary ops accept operands of
equal shape, a scalar operand, or an operand whose shape is a trailing suffix
of the other (the bias case); anything else must go through :func:`bcast_to`
or an explicit reshape. This keeps gradient reduction rules auditable.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used when wrapping non-float data (float32 or float64)."""
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported default dtype {dtype}")
    global _default_dtype
    _default_dtype = dt


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (used by the 64-bit grad check)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """Numpy-backed tensor node of the autodiff graph."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn
        self.name = name

    # -- bookkeeping ---------------------------------------------------------

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap `x` as a constant Tensor, matching `like`'s dtype when given."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.data.dtype:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def parameter(data, name: str = "") -> Tensor:
    arr = np.asarray(data, dtype=_default_dtype)
    return Tensor(arr, requires_grad=True, name=name)


# -- graph construction helpers ------------------------------------------------


def _tracing(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data, parents: tuple, backward_fn) -> Tensor:
    if _tracing(*parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward_fn=backward_fn)
    return Tensor(data)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t.data)
    t._grad += g


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape` (suffix/scalar rules)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    # remaining axes where original had size 1
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_binary_shapes(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.ndim == 0 or b.data.ndim == 0:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ValueError(f"shapes {sa} and {sb} need an explicit reshape/bcast_to")


# -- elementwise binary ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary_shapes(a, b)
    out_data = a.data + b.data

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad, a.data.shape))
        _acc(b, _reduce_to(out.grad, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary_shapes(a, b)
    out_data = a.data - b.data

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad, a.data.shape))
        _acc(b, _reduce_to(-out.grad, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary_shapes(a, b)
    out_data = a.data * b.data

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad * b.data, a.data.shape))
        _acc(b, _reduce_to(out.grad * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary_shapes(a, b)
    out_data = a.data / b.data

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad / b.data, a.data.shape))
        _acc(b, _reduce_to(-out.grad * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to `a` (the clamped branch
    of max(x, const) therefore gets zero gradient)."""
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary_shapes(a, b)
    mask = a.data >= b.data
    out_data = np.where(mask, a.data, b.data)

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad * mask, a.data.shape))
        _acc(b, _reduce_to(out.grad * ~mask, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def minimum(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary_shapes(a, b)
    mask = a.data <= b.data
    out_data = np.where(mask, a.data, b.data)

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad * mask, a.data.shape))
        _acc(b, _reduce_to(out.grad * ~mask, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


# -- elementwise unary ops -----------------------------------------------------


def neg(a: Tensor) -> Tensor:
    def backward_fn(out):
        _acc(a, -out.grad)

    return _make(-a.data, (a,), backward_fn)


def powc(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = a.data ** p

    def backward_fn(out):
        _acc(a, out.grad * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(out):
        _acc(a, out.grad * out.data)

    return _make(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward_fn(out):
        _acc(a, out.grad / a.data)

    return _make(out_data, (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward_fn(out):
        _acc(a, out.grad * 0.5 / out.data)

    return _make(out_data, (a,), backward_fn)


def sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)

    def backward_fn(out):
        _acc(a, out.grad * np.cos(a.data))

    return _make(out_data, (a,), backward_fn)


def cos(a: Tensor) -> Tensor:
    out_data = np.cos(a.data)

    def backward_fn(out):
        _acc(a, out.grad * -np.sin(a.data))

    return _make(out_data, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward_fn(out):
        _acc(a, out.grad * (1.0 - out.data * out.data))

    return _make(out_data, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward_fn(out):
        _acc(a, out.grad * np.sign(a.data))

    return _make(out_data, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward_fn(out):
        _acc(a, out.grad * out.data * (1.0 - out.data))

    return _make(out_data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward_fn(out):
        _acc(a, out.grad * mask)

    return _make(out_data, (a,), backward_fn)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def backward_fn(out):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
        _acc(a, out.grad * d)

    return _make(out_data, (a,), backward_fn)


def stop_grad(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- reductions and shape ops --------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(out):
        g = out.grad
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands; reshape first")
    out_data = a.data @ b.data

    def backward_fn(out):
        _acc(a, out.grad @ b.data.T)
        _acc(b, a.data.T @ out.grad)

    return _make(out_data, (a, b), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward_fn(out):
        _acc(a, out.grad.reshape(a.data.shape))

    return _make(out_data, (a,), backward_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = np.transpose(a.data, axes)

    def backward_fn(out):
        inv = None if axes is None else np.argsort(axes)
        _acc(a, np.transpose(out.grad, inv))

    return _make(out_data, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, out.grad[tuple(idx)])

    return _make(out_data, tensors, backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(out):
        slabs = np.moveaxis(out.grad, axis, 0)
        for t, g in zip(tensors, slabs):
            _acc(t, g)

    return _make(out_data, tensors, backward_fn)


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def backward_fn(out):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _acc(a, g)

    return _make(out_data, (a,), backward_fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Index the leading axis with an integer array of any shape."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_rows needs integer indices")
    out_data = a.data[idx]

    def backward_fn(out):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _acc(a, g)

    return _make(out_data, (a,), backward_fn)


def scatter_rows(base: np.ndarray, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy `base` (a constant) and overwrite rows at `idx` with `rows`.

    `idx` must not contain duplicates; the base contributes no gradient.
    """
    idx = np.asarray(idx)
    out_data = np.array(base, dtype=rows.data.dtype, copy=True)
    out_data[idx] = rows.data

    def backward_fn(out):
        _acc(rows, out.grad[idx])

    return _make(out_data, (rows,), backward_fn)


def bcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = np.broadcast_to(a.data, shape)

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad, a.data.shape))

    return _make(out_data, (a,), backward_fn)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = np.where(mask, a.data, b.data)

    def backward_fn(out):
        _acc(a, _reduce_to(out.grad * mask, a.data.shape))
        _acc(b, _reduce_to(out.grad * ~mask, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(out):
        y = out.data
        gy = out.grad
        dot = (gy * y).sum(axis=axis, keepdims=True)
        _acc(a, y * (gy - dot))

    return _make(out_data, (a,), backward_fn)


def exclusive_cumprod(a: Tensor, axis: int = -1) -> Tensor:
    """out[..., i] = prod(a[..., :i]) with out[..., 0] = 1.

    Entries of `a` must be strictly positive for the backward pass.
    """
    if axis != -1:
        raise ValueError("exclusive_cumprod supports axis=-1 only")
    inc = np.cumprod(a.data, axis=-1)
    out_data = np.ones_like(a.data)
    out_data[..., 1:] = inc[..., :-1]

    def backward_fn(out):
        # d out_i / d a_j = out_i / a_j for j < i
        w = out.grad * out.data
        tail = np.flip(np.cumsum(np.flip(w, axis=-1), axis=-1), axis=-1)
        tail = tail - w  # strict suffix sum
        _acc(a, tail / a.data)

    return _make(out_data, (a,), backward_fn)


# -- structured ops ------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, padding: int = 0, groups: int = 1) -> Tensor:
    """Stride-1 NCHW cross-correlation. `w` is (Cout, Cin/groups, kh, kw)."""
    n, cin, h, wd = x.data.shape
    cout, cg, kh, kw = w.data.shape
    if cin != cg * groups or cout % groups:
        raise ValueError("channel/group mismatch")
    og = cout // groups
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("kernel larger than padded input")
    xg = xp.reshape(n, groups, cg, h + 2 * p, wd + 2 * p)
    wg = w.data.reshape(groups, og, cg, kh, kw)
    out_data = np.zeros((n, groups, og, ho, wo), dtype=x.data.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = xg[:, :, :, dy:dy + ho, dx:dx + wo]
            out_data += np.einsum("ngchw,goc->ngohw", patch, wg[:, :, :, dy, dx],
                                  optimize=True)
    out_data = out_data.reshape(n, cout, ho, wo)

    def backward_fn(out):
        go = out.grad.reshape(n, groups, og, ho, wo)
        gw = np.zeros_like(wg)
        gxp = np.zeros_like(xg)
        for dy in range(kh):
            for dx in range(kw):
                patch = xg[:, :, :, dy:dy + ho, dx:dx + wo]
                gw[:, :, :, dy, dx] = np.einsum("ngohw,ngchw->goc", go, patch,
                                                optimize=True)
                gxp[:, :, :, dy:dy + ho, dx:dx + wo] += np.einsum(
                    "ngohw,goc->ngchw", go, wg[:, :, :, dy, dx], optimize=True)
        gx = gxp.reshape(n, cin, h + 2 * p, wd + 2 * p)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        _acc(x, gx)
        _acc(w, gw.reshape(w.data.shape))

    return _make(out_data, (x, w), backward_fn)


def interp_bilinear(plane: Tensor, uv: Tensor) -> Tensor:
    """Bilinearly sample a (C, H, W) plane at `uv` in [-1, 1]^2 -> (N, C).

    uv[:, 0] runs along the H axis, uv[:, 1] along W. Texel centers sit at
    (i + 0.5) / size * 2 - 1; out-of-range coordinates clamp to the border
    texel and contribute zero gradient to uv there. Non-finite uv is an error.
    """
    c, h, wd = plane.data.shape
    if not np.isfinite(uv.data).all():
        raise ValueError("non-finite uv coordinates")
    gu = (uv.data[:, 0] + 1.0) * 0.5 * h - 0.5
    gv = (uv.data[:, 1] + 1.0) * 0.5 * wd - 0.5
    i0 = np.floor(gu)
    j0 = np.floor(gv)
    fu = (gu - i0)[:, None]
    fv = (gv - j0)[:, None]
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    i0c = np.clip(i0, 0, h - 1)
    i1c = np.clip(i0 + 1, 0, h - 1)
    j0c = np.clip(j0, 0, wd - 1)
    j1c = np.clip(j0 + 1, 0, wd - 1)
    d = plane.data
    f00 = d[:, i0c, j0c].T
    f10 = d[:, i1c, j0c].T
    f01 = d[:, i0c, j1c].T
    f11 = d[:, i1c, j1c].T
    w00 = (1 - fu) * (1 - fv)
    w10 = fu * (1 - fv)
    w01 = (1 - fu) * fv
    w11 = fu * fv
    out_data = f00 * w00 + f10 * w10 + f01 * w01 + f11 * w11

    def backward_fn(out):
        g = out.grad  # (N, C)
        if plane.requires_grad:
            gp = np.zeros((h, wd, c), dtype=plane.data.dtype)
            np.add.at(gp, (i0c, j0c), g * w00)
            np.add.at(gp, (i1c, j0c), g * w10)
            np.add.at(gp, (i0c, j1c), g * w01)
            np.add.at(gp, (i1c, j1c), g * w11)
            _acc(plane, np.moveaxis(gp, 2, 0))
        if uv.requires_grad:
            du = ((f10 - f00) * (1 - fv) + (f11 - f01) * fv) * g
            dv = ((f01 - f00) * (1 - fu) + (f11 - f10) * fu) * g
            guv = np.stack([du.sum(axis=1) * 0.5 * h, dv.sum(axis=1) * 0.5 * wd], axis=1)
            _acc(uv, guv)

    return _make(out_data, (plane, uv), backward_fn)


# -- backward pass -------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
    """Populate .grad on every tensor reachable from the scalar `root`."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    root.grad = np.ones_like(root.data)
    for node in reversed(_topo_order(root)):
        if node._backward_fn is not None:
            node._backward_fn(node)


def collect_parameters(*objs) -> dict[str, Tensor]:
    """Merge the .parameters() dicts of several model components."""
    merged: dict[str, Tensor] = {}
    for obj in objs:
        params = obj.parameters() if hasattr(obj, "parameters") else obj
        for name, t in params.items():
            if name in merged:
                raise ValueError(f"duplicate parameter name {name}")
            merged[name] = t
    return merged
