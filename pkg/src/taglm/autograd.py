"""A small reverse-mode automatic differentiation engine over numpy arrays.

Only the operations the model needs are implemented; the heavier ones
(attention, layer norm, cross-entropy, neighbour aggregation) are fused so the
tape stays short.  Everything runs in float64 so gradients can be checked
against central finite differences.
"""
import numpy as np

from . import _kernels


class Tensor:
    """An array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root):
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def getitem(a, index):
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def square(a):
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


# --------------------------------------------------------------------------
# fused ops

def l2_normalize(a):
    """Row-wise L2 normalisation; all-zero rows stay zero (and pass no gradient)."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x / safe, 0.0)

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(norm > 0, (g - y * proj) / safe, 0.0),)

    return _make(y, (a,), backward)


def layer_norm(a, gain, bias, eps=1e-5):
    gain, bias = as_tensor(gain), as_tensor(bias)
    shape = a.shape
    x2 = a.data.reshape(-1, shape[-1])
    xhat, rstd = _kernels.layer_norm(x2, eps)
    out = (xhat * gain.data + bias.data).reshape(shape)

    def backward(g):
        g2 = g.reshape(-1, shape[-1])
        ggain = (g2 * xhat).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx = _kernels.layer_norm_grad(g2 * gain.data, xhat, rstd).reshape(shape)
        return gx, ggain, gbias

    return _make(out, (a, gain, bias), backward)


def causal_attention(q, k, v):
    """softmax(q k^T / sqrt(d) + causal mask) v over the last two axes."""
    d = q.shape[-1]
    scale = 1.0 / np.sqrt(d)
    t = q.shape[-2]
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    s = np.where(mask, -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _make(out, (q, k, v), backward)


def cross_entropy(logits, targets, weights=None):
    """Weighted mean of per-row cross-entropy; ``weights`` default to uniform."""
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    losses, probs = _kernels.xent_rows(logits.data, targets)

    def backward(g):
        gl = probs.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (w * g)[:, None],)

    return _make(np.dot(w, losses), (logits,), backward)


def segment_mean(x, indptr, indices):
    """Mean over CSR neighbour lists (rows of ``x`` indexed by ``indices``)."""
    n_src = x.shape[0]
    out = _kernels.segment_mean(x.data, indptr, indices)
    return _make(out, (x,),
                 lambda g: (_kernels.segment_mean_grad(g, indptr, indices, n_src),))


def gather_rows(table, idx):
    """``table[idx]`` for an integer index array; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def backward(g):
        flat = g.reshape(-1, shape[-1])
        out = np.zeros(shape)
        _kernels.scatter_add_rows(out, idx.reshape(-1), flat)
        return (out,)

    return _make(table.data[idx], (table,), backward)


def place_rows(base, rows, flat_positions):
    """Copy of ``base`` (B, T, d) with ``rows`` written at flattened positions."""
    base = as_tensor(base)
    shape = base.shape
    flat_positions = np.asarray(flat_positions, dtype=np.int64)
    out = base.data.reshape(-1, shape[-1]).copy()
    out[flat_positions] = rows.data

    def backward(g):
        g2 = g.reshape(-1, shape[-1])
        gbase = g2.copy()
        gbase[flat_positions] = 0.0
        return gbase.reshape(shape), g2[flat_positions]

    return _make(out.reshape(shape), (base, rows), backward)
