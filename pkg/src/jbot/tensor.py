"""Minimal dense tensor with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require a
gradient record a node holding the parents and a backward closure; calling
:func:`backward` on a scalar walks the nodes in reverse topological order and
accumulates gradients into leaves.

Broadcasting is restricted to leading-dimension expansion: an operand whose
shape is a suffix of the other's shape is expanded over the leading axes.
Anything else is a :class:`ShapeError`.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels

_default_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{primitive}: incompatible shapes {desc}")


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _default_dtype = dtype


@contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # basic properties -----------------------------------------------------
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
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self):
        backward(self)

    def detach(self):
        return stop_gradient(self)

    # operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------------------
# backward


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Gradients of shared subexpressions are summed. Intermediate nodes are
    released afterwards, so a graph can be differentiated only once.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not require grad")
    order = _topological(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


def stop_gradient(t):
    """Same values, no graph edge back to ``t``."""
    return Tensor(as_tensor(t).data, requires_grad=False, dtype=as_tensor(t).dtype)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_expand(primitive, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(primitive, sa, sb)


def _reduce_to(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_expand("add", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_expand("sub", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_expand("mul", a, b)

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_expand("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def scale(a, c):
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a, min_value=None):
    """Natural log; with ``min_value`` the input is clamped from below and the
    clamped entries get zero gradient."""
    a = as_tensor(a)
    x = a.data
    if min_value is None:
        out = np.log(x)

        def bw(g):
            return (g / x,)

    else:
        keep = x > min_value
        out = np.log(np.where(keep, x, a.dtype.type(min_value)))

        def bw(g):
            return (np.where(keep, g / np.where(keep, x, 1), 0).astype(x.dtype),)

    return _node(out, (a,), bw, "log")


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def gelu(a):
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = np.ascontiguousarray(a.data)
    out = kernels.gelu_fwd(x)
    return _node(out, (a,), lambda g: (kernels.gelu_bwd(x, np.ascontiguousarray(g)),), "gelu")


def apply_mask(a, mask):
    """Multiply by a constant array of the same shape (dropout masks)."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=a.dtype)
    if m.shape != a.shape:
        raise ShapeError("apply_mask", a.shape, m.shape)
    return _node(a.data * m, (a,), lambda g: (g * m,), "apply_mask")


def dropout(a, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return as_tensor(a)
    a = as_tensor(a)
    keep = rng.random(a.shape) >= rate
    return apply_mask(a, keep.astype(a.dtype) / a.dtype.type(1.0 - rate))


def masked_fill(a, mask, value):
    """Replace rows ``a[..., :]`` where ``mask`` (shape ``a.shape[:-1]``) is true
    by the vector ``value``."""
    a, value = as_tensor(a), as_tensor(value)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:-1] or value.shape != a.shape[-1:]:
        raise ShapeError("masked_fill", a.shape, mask.shape, value.shape)
    m = mask[..., None]
    out = np.where(m, value.data, a.data)

    def bw(g):
        return np.where(m, 0, g).astype(g.dtype), g[mask].sum(axis=0)

    return _node(out, (a, value), bw, "masked_fill")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    """``(..., n, k) @ (..., k, m)`` with equal leading dims, or a 2-D right
    operand expanded over ``a``'s leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    if b.ndim == 2:
        out = a.data @ b.data

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            return ga, gb

    elif sa[:-2] == sb[:-2]:
        out = a.data @ b.data

        def bw(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    else:
        raise ShapeError("matmul", sa, sb)
    return _node(out, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape):
    """Expand over new leading dimensions only."""
    a = as_tensor(a)
    shape = tuple(shape)
    if shape[len(shape) - a.ndim:] != a.shape:
        raise ShapeError("broadcast_to", a.shape, shape)
    out = np.broadcast_to(a.data, shape).copy()
    return _node(out, (a,), lambda g: (_reduce_to(g, a.shape),), "broadcast_to")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _node(out, ts, bw, "concat")


def getitem(a, idx):
    """Slicing / integer gather. Repeated indices accumulate in backward."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError:
        raise ShapeError("getitem", a.shape) from None
    out = np.array(out, dtype=a.dtype, copy=True)

    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(i, (np.ndarray, list)) for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(out, (a,), bw, "getitem")


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def min_(a, axis=-1):
    """Minimum along ``axis``; gradient goes to the first argmin."""
    a = as_tensor(a)
    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), bw, "min")


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis`` (zero gradient at the origin)."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, g * a.data / safe, 0).astype(a.dtype),)

    out = n if keepdims else n.squeeze(axis)
    return _node(out, (a,), bw, "norm")


def l2_normalize(a, eps=1e-12):
    """Rows scaled to unit norm along the last axis."""
    a = as_tensor(a)
    n = np.maximum(np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)), eps)
    y = a.data / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _node(y, (a,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# fused primitives


def softmax(a, temperature=1.0, mask=None):
    """Softmax over the last axis of ``a / temperature``.

    ``mask`` is a boolean array broadcastable to ``a`` marking admissible
    entries; excluded entries get probability exactly 0.
    """
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError("softmax: temperature must be positive")
    shape = a.shape
    c = shape[-1]
    x2 = np.ascontiguousarray(a.data.reshape(-1, c))
    allow = None
    if mask is not None:
        try:
            allow = np.broadcast_to(np.asarray(mask, dtype=bool), shape).reshape(-1, c)
        except ValueError:
            raise ShapeError("softmax", shape, np.shape(mask)) from None
    inv_t = a.dtype.type(1.0 / temperature)
    p2 = kernels.softmax_fwd(x2, allow, inv_t)

    def bw(g):
        return (kernels.softmax_bwd(p2, np.ascontiguousarray(g.reshape(-1, c)), inv_t).reshape(shape),)

    return _node(p2.reshape(shape), (a,), bw, "softmax")


def layer_norm(a, gamma, beta, eps=1e-5):
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    x2 = np.ascontiguousarray(a.data.reshape(-1, d))
    y, xhat, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, a.dtype.type(eps))

    def bw(g):
        dx, dg, db = kernels.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return dx.reshape(a.shape), dg, db

    return _node(y.reshape(a.shape), (a, gamma, beta), bw, "layer_norm")


def pairwise_distance(a, b):
    """Euclidean distance matrix between rows of ``a (n, d)`` and ``b (m, d)``.

    Coincident rows get zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("pairwise_distance", a.shape, b.shape)
    dist = kernels.pairwise_dist(np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))

    def bw(g):
        w = np.where(dist > 0, g / np.where(dist > 0, dist, 1), 0).astype(a.dtype)
        ga = w.sum(axis=1)[:, None] * a.data - w @ b.data
        gb = w.sum(axis=0)[:, None] * b.data - w.T @ a.data
        return ga, gb

    return _node(dist, (a, b), bw, "pairwise_distance")


# ---------------------------------------------------------------------------
# serialization


def save_npy(path, t):
    """Write a tensor (or array) as a .npy v1.0 file, C order, little endian."""
    arr = np.ascontiguousarray(as_tensor(t).data if isinstance(t, Tensor) else np.asarray(t))
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, arr, version=(1, 0), allow_pickle=False)


def load_npy(path, requires_grad=False):
    arr = np.load(path, allow_pickle=False)
    return Tensor(arr, requires_grad=requires_grad, dtype=arr.dtype)


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(fn, arrays, index, h=1e-5):
    """Central finite-difference gradient of scalar ``fn(*arrays)`` w.r.t.
    ``arrays[index]`` (arrays are perturbed in place and restored)."""
    x = arrays[index]
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(*arrays))
        flat[i] = orig - h
        fm = float(fn(*arrays))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), floor)
    return float(np.abs(analytic - numeric).max(initial=0) / denom)


def check_gradients(fn, arrays, h=1e-5):
    """Compare autodiff against central differences for every input.

    ``fn`` maps Tensors to a scalar Tensor. Returns the list of relative
    errors (max abs difference over max magnitude), one per input array.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with default_dtype(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        backward(out)

        def scalar(*arrs):
            with no_grad():
                return fn(*[Tensor(x) for x in arrs]).item()

        errors = []
        for i, leaf in enumerate(leaves):
            num = numerical_gradient(scalar, arrays, i, h)
            ana = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
            errors.append(relative_error(ana, num))
    return errors
