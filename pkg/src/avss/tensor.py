"""Minimal reverse-mode autodiff over numpy arrays.

Every operation on a gradient-requiring Tensor records a backward closure;
``Tensor.backward()`` walks the graph once in reverse topological order and
accumulates into ``.grad`` buffers.  The default scalar type is 64-bit (tight
gradient checks); training switches to 32-bit via ``set_default_dtype``.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, ShapeMismatch

_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype):
    """Set the scalar type used for newly created tensors (float32/float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default scalar type."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


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


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """An n-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        """Build an op result, recording the graph only when it matters."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------------

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

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic dunders ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- graph methods ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf."""
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def _toposort(root):
    """Deterministic post-order over the graph (iterative, parents in record order)."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        # reversed so that parents are visited in recorded order
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=np.asarray(x, dtype=dtype).dtype)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sum_to_shape(g, shape):
    """Undo numpy broadcasting: reduce gradient g back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    data = a.data + b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(g, b.shape))

    return Tensor._result(data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    data = a.data - b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(-g, b.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    data = a.data * b.data

    def backward(g):
        _accum(a, _sum_to_shape(g * b.data, a.shape))
        _accum(b, _sum_to_shape(g * a.data, b.shape))

    return Tensor._result(data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    data = a.data / b.data

    def backward(g):
        _accum(a, _sum_to_shape(g / b.data, a.shape))
        _accum(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(data, (a, b), backward)


def neg(a):
    def backward(g):
        _accum(a, -g)

    return Tensor._result(-a.data, (a,), backward)


def square(a):
    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return Tensor._result(a.data * a.data, (a,), backward)


def sqrt(a):
    """Elementwise square root; callers guarantee strictly positive input."""
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / data))

    return Tensor._result(data, (a,), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return Tensor._result(data, (a,), backward)


def log(a):
    def backward(g):
        _accum(a, g / a.data)

    return Tensor._result(np.log(a.data), (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a):
    """max(x, 0); the subgradient at 0 is taken as 0."""
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        _accum(a, g * mask)

    return Tensor._result(data, (a,), backward)


def leaky_relu(a, slope=0.2):
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data)

    def backward(g):
        _accum(a, g * np.where(mask, 1.0, slope))

    return Tensor._result(data, (a,), backward)


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return Tensor._result(data, (a,), backward)


def tanh(a):
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return Tensor._result(data, (a,), backward)


def softmax(a, axis):
    """Numerically stable softmax along `axis` (max-subtracted exponentials)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeMismatch(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return Tensor._result(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return Tensor._result(data, (a,), backward)


def mean_(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def norm2(a, axis=None):
    """Euclidean norm over `axis` (all axes when None); subgradient 0 at zero."""
    sq = (a.data * a.data).sum(axis=axis)
    data = np.sqrt(sq)

    def backward(g):
        g = np.asarray(g)
        denom = np.maximum(data, np.finfo(a.data.dtype).tiny)
        scale = g / denom
        if axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(axes):
                scale = np.expand_dims(scale, ax)
        _accum(a, a.data * scale)

    return Tensor._result(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape):
    original = a.shape

    def backward(g):
        _accum(a, g.reshape(original))

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return Tensor._result(a.data.transpose(axes), (a,), backward)


def getitem(a, key):
    """Basic indexing only (ints/slices); gradient scatters back into place."""
    data = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        _accum(a, buf)

    return Tensor._result(data.copy(), (a,), backward)


def concat(tensors, axis):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return Tensor._result(data, tuple(tensors), backward)


def expand(a, shape):
    """Broadcast to `shape`; gradient sums back over the broadcast axes."""
    data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        _accum(a, _sum_to_shape(g, a.shape))

    return Tensor._result(data, (a,), backward)


def index_select(a, axis, indices):
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, indices, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, _axis_key(axis, indices, a.ndim), g)
        _accum(a, buf)

    return Tensor._result(data, (a,), backward)


def _axis_key(axis, indices, ndim):
    key = [slice(None)] * ndim
    key[axis] = indices
    return tuple(key)


def upsample_nearest(a, factors):
    """Nearest-neighbor upsampling of the trailing axes by integer factors.

    `factors` pairs with the last len(factors) axes; gradient sum-pools.
    """
    data = a.data
    offset = a.ndim - len(factors)
    for i, f in enumerate(factors):
        if f != 1:
            data = np.repeat(data, f, axis=offset + i)

    def backward(g):
        for i, f in enumerate(factors):
            if f == 1:
                continue
            ax = offset + i
            new_shape = g.shape[:ax] + (g.shape[ax] // f, f) + g.shape[ax + 1 :]
            g = g.reshape(new_shape).sum(axis=ax + 1)
        _accum(a, g)

    return Tensor._result(data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(
            f"matmul needs matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _sum_to_shape(ga, a.shape))
        _accum(b, _sum_to_shape(gb, b.shape))

    return Tensor._result(data, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _tuplify(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ShapeMismatch(f"expected {n} per-axis values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def conv_nd(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """N-dimensional cross-correlation (n in {1, 2, 3}).

    weight has shape (C_out, C_in, *kernel); x is (C_in, *spatial) or
    (B, C_in, *spatial).  Output extent per axis is
    floor((in + 2*pad - ((k-1)*dilation + 1)) / stride) + 1.
    """
    ndim_sp = weight.ndim - 2
    if ndim_sp not in (1, 2, 3):
        raise ShapeMismatch(f"kernel rank {weight.ndim} unsupported (want spatial rank 1-3)")
    batched = x.ndim == ndim_sp + 2
    if not batched and x.ndim != ndim_sp + 1:
        raise ShapeMismatch(
            f"input rank {x.ndim} incompatible with {ndim_sp}-d kernel {weight.shape}"
        )
    xb = x if batched else reshape(x, (1,) + x.shape)
    if xb.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"channel mismatch: input {xb.shape} vs kernel {weight.shape}"
        )
    stride = _tuplify(stride, ndim_sp)
    padding = _tuplify(padding, ndim_sp)
    dilation = _tuplify(dilation, ndim_sp)
    keff = tuple(
        (weight.shape[2 + ax] - 1) * dilation[ax] + 1 for ax in range(ndim_sp)
    )
    for ax in range(ndim_sp):
        if xb.shape[2 + ax] + 2 * padding[ax] < keff[ax]:
            raise ShapeMismatch(
                f"kernel {weight.shape[2:]} (dilation {dilation}) larger than "
                f"padded input {xb.shape[2:]} (pad {padding})"
            )

    out = _conv_forward(xb, weight, bias, stride, padding, dilation, keff)
    return out if batched else reshape(out, out.shape[1:])


def _conv_forward(x, w, bias, stride, padding, dilation, keff):
    ndim_sp = w.ndim - 2
    pad_spec = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pad_spec)
    windows = sliding_window_view(xp, keff, axis=tuple(range(2, 2 + ndim_sp)))
    sub = (
        (slice(None), slice(None))
        + tuple(slice(None, None, s) for s in stride)
        + tuple(slice(None, None, d) for d in dilation)
    )
    windows = windows[sub]  # (B, C, *out, *k)
    out_sp = windows.shape[2 : 2 + ndim_sp]

    k_axes_win = tuple(range(2 + ndim_sp, 2 + 2 * ndim_sp))
    k_axes_w = tuple(range(2, 2 + ndim_sp))
    data = np.tensordot(windows, w.data, axes=((1,) + k_axes_win, (1,) + k_axes_w))
    data = np.moveaxis(data, -1, 1)  # (B, C_out, *out)
    data = np.ascontiguousarray(data)
    if bias is not None:
        data += bias.data.reshape((1, -1) + (1,) * ndim_sp)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0,) + tuple(range(2, 2 + ndim_sp))))
        if w.requires_grad:
            bo_axes = (0,) + tuple(range(2, 2 + ndim_sp))
            gw = np.tensordot(g, windows, axes=(bo_axes, bo_axes))  # (CO, C, *k)
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in np.ndindex(*w.shape[2:]):
                wk = w.data[(slice(None), slice(None)) + kk]  # (CO, C)
                contrib = np.tensordot(g, wk, axes=([1], [0]))  # (B, *out, C)
                contrib = np.moveaxis(contrib, -1, 1)
                sl = tuple(
                    slice(
                        kk[i] * dilation[i],
                        kk[i] * dilation[i] + stride[i] * out_sp[i],
                        stride[i],
                    )
                    for i in range(ndim_sp)
                )
                gxp[(slice(None), slice(None)) + sl] += contrib
            unpad = tuple(
                slice(p, gxp.shape[2 + i] - p) for i, p in enumerate(padding)
            )
            _accum(x, gxp[(slice(None), slice(None)) + unpad])

    return Tensor._result(data, parents, backward)
