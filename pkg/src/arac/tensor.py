"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable function in this
module records the output node together with a closure mapping the output
gradient to one gradient per input; :meth:`Tensor.backward` replays those
closures in reverse topological order.

Gradients accumulate into leaf tensors (``grad += ...``) until cleared with
:meth:`Tensor.zero_grad`, so calling ``backward`` twice on the same graph
doubles every leaf gradient. Interior nodes do not keep their gradients.

Binary elementwise ops require identical shapes; use :func:`expand` to
broadcast explicitly. :func:`matmul` is the exception and broadcasts leading
batch extents.
"""
import contextlib
import itertools

import numpy as np

from . import kernels
from .errors import DegenerateInputError, ShapeError, UsageError

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "set_default_dtype", "default_dtype",
    "record", "graph_order", "add", "sub", "mul", "neg", "scale", "add_constant",
    "matmul", "linear", "softmax", "layer_norm", "avg_pool_lastdim", "sigmoid",
    "relu", "sum", "mean", "masked_mean", "concat", "reshape", "transpose",
    "expand", "getitem",
]

_ids = itertools.count()
_default_dtype = np.dtype(np.float64)
_grad_enabled = True
_fault_op = None


def set_default_dtype(dtype):
    """Set the dtype used for tensors built from non-float data."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_fault(op):
    """Scale the backward of every ``op`` node by 1.01. Test hook only."""
    global _fault_op
    prev = _fault_op
    _fault_op = op
    try:
        yield
    finally:
        _fault_op = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every tracked leaf reachable from this scalar."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that depends on no tracked input")
        order = graph_order(self)
        grads = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgs = node._backward(g)
            if _fault_op is not None and node.op == _fault_op:
                pgs = tuple(None if pg is None else pg * 1.01 for pg in pgs)
            for p, pg in zip(node._parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg
        if self._backward is not None:
            self.grad = np.ones_like(self.data)


def graph_order(root):
    """Tracked nodes reachable from ``root``, every node after all of its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def record(data, parents, backward, op):
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or ``None``) per parent, each
    with the parent's shape.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    c = float(c)
    return record(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def add_constant(a, c):
    """Add a non-differentiable array that broadcasts to ``a.shape``."""
    c = np.asarray(c, dtype=a.dtype)
    try:
        out = a.data + c
    except ValueError:
        raise ShapeError(f"add_constant: {c.shape} does not broadcast to {a.shape}") from None
    if out.shape != a.shape:
        raise ShapeError(f"add_constant: {c.shape} does not broadcast to {a.shape}")
    return record(out, (a,), lambda g: (g,), "add_constant")


def sigmoid(a):
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a):
    x = a.data
    pos = x > 0
    return record(np.where(pos, x, 0).astype(x.dtype, copy=False), (a,),
                  lambda g: (g * pos,), "relu")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``[.., m, k] @ [.., k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ in {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        try:
            np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _reduce_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record(np.matmul(ad, bd), (a, b), backward, "matmul")


def linear(x, w, b):
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape ``[d_in, d_out]``."""
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: x {x.shape}, weight {w.shape}, bias {b.shape} are incompatible")
    xd, wd = x.data, w.data
    d_in, d_out = wd.shape

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = np.matmul(g, wd.T)
        gw = xd.reshape(-1, d_in).T @ g2
        return gx, gw, g2.sum(axis=0)

    return record(np.matmul(xd, wd) + b.data, (x, w, b), backward, "linear")


# -- normalization -----------------------------------------------------------

def softmax(x):
    """Softmax over the last axis."""
    xd = x.data
    if not np.isfinite(xd).all():
        raise FloatingPointError("softmax: non-finite input")
    s = kernels.softmax_forward(xd)
    return record(s, (x,), lambda g: (kernels.softmax_backward(s, g),), "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm: last extent must be >= 2, got {x.shape}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    xhat, rstd = kernels.layer_norm_forward(x.data, eps)
    gd = gamma.data

    def backward(g):
        g2 = g.reshape(-1, d)
        ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        gx = kernels.layer_norm_backward(xhat, rstd, g * gd)
        return gx, ggamma, g2.sum(axis=0)

    return record(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- reductions and pooling --------------------------------------------------

def avg_pool_lastdim(x, kernel, stride):
    """Mean over windows of the last axis, no padding."""
    d = x.shape[-1]
    if kernel < 1 or stride < 1:
        raise ShapeError(f"avg_pool_lastdim: kernel {kernel} and stride {stride} must be >= 1")
    if kernel > d:
        raise ShapeError(f"avg_pool_lastdim: kernel {kernel} exceeds last extent {d}")
    d_out = (d - kernel) // stride + 1
    xd = x.data
    win = np.lib.stride_tricks.sliding_window_view(xd, kernel, axis=-1)[..., ::stride, :]
    out = win.mean(axis=-1)

    def backward(g):
        gx = np.zeros_like(xd)
        gk = g / kernel
        stop = stride * (d_out - 1) + 1
        for off in range(kernel):
            gx[..., off:off + stop:stride] += gk
        return (gx,)

    return record(out, (x,), backward, "avg_pool_lastdim")


def sum(x, axis=None, keepdims=False):
    xd = x.data
    out = np.asarray(xd.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return record(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    xd = x.data
    out = np.asarray(xd.mean(axis=axis, keepdims=keepdims))
    n = xd.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xd.shape).copy(),)

    return record(out, (x,), backward, "mean")


def masked_mean(x, mask, axis):
    """Mean over ``axis`` restricted to positions where ``mask`` is true.

    ``mask`` has shape ``x.shape[:axis + 1]``; the reduced axis is kept with
    extent 1.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:axis + 1]:
        raise ShapeError(f"masked_mean: mask {mask.shape} vs input {x.shape} at axis {axis}")
    count = mask.sum(axis=axis, keepdims=True)
    if (count == 0).any():
        raise DegenerateInputError("masked_mean: every position along the axis is masked")
    w = (mask / count).astype(x.dtype)
    w = w.reshape(w.shape + (1,) * (x.ndim - w.ndim))
    out = (x.data * w).sum(axis=axis, keepdims=True)
    shape = x.shape
    return record(out, (x,), lambda g: (np.broadcast_to(g, shape) * w,), "masked_mean")


# -- structural --------------------------------------------------------------

def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along {axis}: {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inv = _inverse_perm(axes)
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


_perm_cache = {}


def _inverse_perm(axes):
    inv = _perm_cache.get(axes)
    if inv is None:
        inv = _perm_cache[axes] = tuple(int(i) for i in np.argsort(axes))
    return inv


def expand(x, shape):
    """Broadcast ``x`` to ``shape`` (numpy rules); the backward sums back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return record(out, (x,), lambda g: (_reduce_to(g, src),), "expand")


def getitem(x, idx):
    xd = x.data
    out = xd[idx]

    def backward(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return record(np.array(out, copy=True), (x,), backward, "getitem")
