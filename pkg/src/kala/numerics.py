"""Dense float64 tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record their parents and a closure that maps the output adjoint to
parent adjoints; :func:`backward` replays those closures in reverse
topological order. Nothing is retained between calls to ``backward``: the
graph is dropped with the last reference to the loss.
"""

import contextlib
import math

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, DegenerateRowError, DimensionError, NumericError

DTYPE = np.float64
LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    """Build an op output, recording the graph only when someone needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x, c):
    """Multiply by a python scalar."""
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x):
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def leaky_relu(x, slope=0.2):
    on = x.data > 0
    factor = np.where(on, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward, "gelu")


def dropout(x, p, rng, training):
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ----------------------------------------------------------------------------
# shape
# ----------------------------------------------------------------------------

def reshape(x, shape):
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 backward, "concat")


def take_rows(table, index):
    """``table[index]`` along axis 0, with scatter-add backward.

    ``index`` may have any integer shape; the output shape is
    ``index.shape + table.shape[1:]``.
    """
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def backward(g):
        grad = np.zeros_like(table.data)
        flat_idx = index.reshape(-1)
        kernels.scatter_add_rows(grad, flat_idx, g.reshape(flat_idx.shape[0], -1))
        return (grad,)

    return _make(out, (table,), backward, "take_rows")


# ----------------------------------------------------------------------------
# reductions and products
# ----------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / count)


def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=LN_EPS):
    """Standardise the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return _make(out, (x, gain, bias), backward, "layer_norm")


def softmax_rows(x, mask=None):
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks entries that take part;
    masked entries come out exactly 0. A row with nothing unmasked raises
    :class:`DegenerateRowError`.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (x,), backward, "softmax")


def cross_entropy(logits, target, mask=None, reduction="mean"):
    """Negative log-likelihood of integer ``target`` under softmax(``logits``).

    ``logits`` is [N, C]; ``mask`` (optional [N, C]) removes classes from the
    partition function.
    """
    z = logits.data
    n, c = z.shape
    target = np.asarray(target, dtype=np.int64)
    if target.shape != (n,):
        raise DimensionError(f"target shape {target.shape} does not match {n} rows")
    if np.any(target < 0) or np.any(target >= c):
        raise ContractError("target class out of range")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask[np.arange(n), target].all():
            raise ContractError("target class is masked out")
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    losses = lse - z[np.arange(n), target]
    probs = np.exp(z - lse[:, None])
    if reduction == "mean":
        out, weight = losses.mean(), 1.0 / n
    elif reduction == "sum":
        out, weight = losses.sum(), 1.0
    else:
        raise ContractError(f"unknown reduction {reduction!r}")

    def backward(g):
        grad = probs.copy()
        grad[np.arange(n), target] -= 1.0
        return (grad * (g * weight),)

    return _make(np.asarray(out), (logits,), backward, "cross_entropy")


# ----------------------------------------------------------------------------
# segment ops (graph message passing)
# ----------------------------------------------------------------------------

def segment_sum(x, segment, num_segments):
    segment = np.asarray(segment, dtype=np.int64)
    out = kernels.segment_sum(x.data, segment, num_segments)
    return _make(out, (x,), lambda g: (g[segment],), "segment_sum")


def segment_softmax(scores, segment, num_segments, mask):
    """Softmax of 1-D ``scores`` within each segment; masked entries get 0.

    Segments whose entries are all masked produce all zeros; callers decide
    whether that is an error.
    """
    segment = np.asarray(segment, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    alpha = kernels.segment_softmax(scores.data, segment, num_segments, mask)

    def backward(g):
        return (kernels.segment_softmax_backward(alpha, g, segment, num_segments),)

    return _make(alpha, (scores,), backward, "segment_softmax")


# ----------------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------------

def build_tape(loss):
    """Topologically ordered list of graph nodes reachable from ``loss``.

    Inputs always precede the operations that consume them.
    """
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward() needs a scalar loss tensor")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = build_tape(loss)
    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg


def finite_difference_gradient(f, params, h=1e-5, indices=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. each tensor in ``params``.

    ``f`` takes no arguments and reads the parameters' current data. When
    ``indices`` is given it maps a parameter position to the flat coordinates
    to probe; other coordinates are reported as NaN.
    """
    if h <= 0:
        raise ContractError("step size must be positive")
    grads = []
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        est = np.full(flat.shape, np.nan)
        coords = range(flat.size) if indices is None or k not in indices else indices[k]
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            down = float(f())
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite objective while probing parameter {k}[{i}]")
            est[i] = (up - down) / (2.0 * h)
        grads.append(est.reshape(p.shape))
    return grads


def relative_error(analytic, numeric, floor=1e-5):
    """Max elementwise ``|a-n| / max(|a|, |n|, floor)``, ignoring NaN probes.

    The floor keeps round-off on near-zero coordinates (~1e-10 for h=1e-5)
    from dominating the ratio.
    """
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    keep = ~np.isnan(numeric)
    if not keep.any():
        return 0.0
    a, n = analytic[keep], numeric[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
