"""Float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that track
gradients record their parents and a local backward rule; :func:`backward`
walks that dynamically built graph in reverse topological order.

Every op accepts leading batch dimensions where that is natural (numpy
broadcasting), which lets the network run a whole minibatch through one
graph. Gradients of broadcast operands are summed back to their shape.

:func:`numerical_gradient` and :func:`gradient_check` provide the central
finite-difference oracle used throughout the test suite.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, ParameterError

NORM_EPS = 1e-12

_grad_enabled = True


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


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad)


def _node(data, parents, backward_fn):
    """Build the output tensor and, when needed, link it into the graph."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def hadamard(a, b):
    """Elementwise product of two same-shape tensors (no broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs identical shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), bw)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a):
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), bw)


def outer(u, v):
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError(f"outer needs two vectors, got {u.shape} and {v.shape}")
    ud, vd = u.data, v.data
    return _node(np.outer(ud, vd), (u, v), lambda g: (g @ vd, ud @ g))


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` over the last axis of ``x``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def getitem(a, index):
    src = a.shape

    def bw(g):
        z = np.zeros(src)
        np.add.at(z, index, g)
        return (z,)

    return _node(a.data[index], (a,), bw)


def gather_rows(a, indices):
    """Rows of ``a`` (first axis) at ``indices``, repeats allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ParameterError(f"row index out of range for {a.shape[0]} rows")
    return getitem(a, idx)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_rows(tensors):
    return concat(tensors, axis=-2 if tensors[0].ndim >= 2 else 0)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _node(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def mean_rows(a):
    """Average over the row axis (second to last for matrices)."""
    return mean(a, axis=-2 if a.ndim >= 2 else 0)


# ---------------------------------------------------------------- fused ops


def softmax(x, temperature=1.0, axis=-1):
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _node(out, (x,), bw)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize over the last axis, then apply optional gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    y = _node(xhat, (x,), bw)
    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def l2_normalize(x, axis=-1):
    """Scale to unit L2 norm along ``axis``; zero-norm slices are rejected."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateInputError("l2_normalize: vector norm below 1e-12")
    out = xd / norm

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _node(out, (x,), bw)


def cosine_sim(a, b):
    """Cosine similarity of two equal-length vectors, as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim needs equal-length vectors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateInputError("cosine_sim: zero-norm input")
    return sum_(mul(l2_normalize(a), l2_normalize(b)))


def topk(x, k):
    """The ``k`` largest entries as ``(index, value)`` pairs, descending.

    Ties go to the lower index. Not differentiable; callers gather from the
    tracked tensor with the returned indices when gradients are needed.
    """
    values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if values.ndim != 1:
        raise DimensionError(f"topk expects a vector, got shape {values.shape}")
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"topk: k={k} outside [1, {n}]")
    order = np.argsort(-values, kind="stable")[:k]
    return [(int(i), float(values[i])) for i in order]


# ---------------------------------------------------------------- backward


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tracked leaf."""
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise ContractError("backward needs a scalar root tensor")
    if not root.requires_grad:
        raise ContractError("backward root does not track gradients")

    order = []
    seen = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- finite differences


def numerical_gradient(fn, tensors, h=1e-5, coords=None):
    """Central-difference gradients of scalar ``fn()`` w.r.t. ``tensors``.

    ``coords`` optionally maps a tensor's position in ``tensors`` to the flat
    indices to probe; unprobed entries are left as NaN.
    """
    out = []
    with no_grad():
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            g = np.full(flat.shape, np.nan)
            idx = range(flat.size) if coords is None or ti not in coords else coords[ti]
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                fp = float(fn().data)
                flat[j] = orig - h
                fm = float(fn().data)
                flat[j] = orig
                g[j] = (fp - fm) / (2 * h)
            out.append(g.reshape(t.shape))
    return out


@dataclass
class GradCheck:
    max_rel_err: float
    worst_tensor: int
    worst_index: int
    checked: int


def relative_error(analytic, numeric, floor=1e-8):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(fn, tensors, h=1e-5, floor=1e-6, max_coords=None, rng=None):
    """Compare backward() against central differences for scalar ``fn()``.

    The relative error uses ``max(|analytic|, |numeric|, floor)`` as its
    denominator. Central differences carry roundoff of order
    ``eps * |f| / h`` (about 1e-10 here), so the floor stops entries whose
    true gradient is exactly zero, such as attention key biases, from
    reporting pure noise as a large relative error.

    With ``max_coords`` set, at most that many randomly chosen entries per
    tensor are probed (``rng`` decides which).
    """
    for t in tensors:
        t.zero_grad()
    backward(fn())
    coords = None
    if max_coords is not None:
        rng = rng or np.random.default_rng(0)
        coords = {
            i: np.sort(rng.choice(t.size, size=min(max_coords, t.size), replace=False))
            for i, t in enumerate(tensors)
        }
    numeric = numerical_gradient(fn, tensors, h=h, coords=coords)
    worst = GradCheck(0.0, -1, -1, 0)
    for i, (t, n) in enumerate(zip(tensors, numeric)):
        mask = ~np.isnan(n.reshape(-1))
        err = relative_error(t.grad.reshape(-1)[mask], n.reshape(-1)[mask], floor)
        worst.checked += int(mask.sum())
        if err.size and err.max() > worst.max_rel_err:
            worst.max_rel_err = float(err.max())
            worst.worst_tensor = i
            worst.worst_index = int(np.flatnonzero(mask)[err.argmax()])
    return worst
