"""Dense 2-D tensors with reverse-mode differentiation.

Every tensor is a ``rows x cols`` float64 array. Operations on tensors that
require gradients remember their inputs and a closure mapping the output
adjoint to input adjoints. :func:`backward` orders the reachable nodes by
creation sequence and replays those closures newest first, which is exactly
reverse execution order.

Values are stored read-only: a forward pass never mutates a tensor, and the
optimizer replaces a parameter's ``values`` array instead of writing into it.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .exceptions import ContractError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "as_tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "sum",
    "mean",
    "softmax_rows",
    "layer_norm",
    "conv1d",
    "concat",
    "backward",
    "finite_diff_grad",
]

_sequence = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _check_finite(values, op):
    if not np.isfinite(values).all():
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """A 2-D float64 array that can take part in differentiation.

    Parameters
    ----------
    values : array_like
        Scalars become ``1 x 1``; 1-D input becomes a single row.
    requires_grad : bool
        Whether gradients should be accumulated into :attr:`grad`.
    name : str, optional
        Label used in error messages and gradient reports.
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "op", "_parents", "_backward", "_seq")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.array(values, dtype=np.float64, ndmin=2)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        _check_finite(arr, name or "tensor")
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_sequence)

    @classmethod
    def _result(cls, values, op, parents, backward_fn):
        _check_finite(values, op)
        out = cls.__new__(cls)
        if values.flags.writeable:
            values.flags.writeable = False
        out.values = values
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward_fn if track else None
        out._seq = next(_sequence)
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self):
        return self.values.copy()

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def detach(self):
        return Tensor(self.values)

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _index(self, key)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Differentiable operations reachable from a scalar, newest first.

    ``nodes`` holds every tensor that requires a gradient and feeds the
    loss, sorted by descending creation sequence. Replaying ``nodes`` in
    order visits each operation once, after all of its consumers.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        seen = {id(root): root}
        stack = [root]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen[id(parent)] = parent
                    stack.append(parent)
        nodes = sorted(seen.values(), key=lambda t: t._seq, reverse=True)
        return cls(nodes)

    @property
    def operations(self):
        return [n for n in self.nodes if not n.is_leaf]

    @property
    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def __len__(self):
        return len(self.nodes)


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Gradients add onto whatever the leaves already hold; call
    ``zero_grad`` between steps.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    if graph is None:
        graph = Graph.trace(loss)
    adjoints = {id(loss): np.ones((1, 1))}
    for node in graph.nodes:
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = adjoints.get(key)
            adjoints[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic with row/column broadcasting
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def grad(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.values + b.values, "add", (a, b), grad)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def grad(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.values - b.values, "sub", (a, b), grad)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def grad(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return Tensor._result(a.values * b.values, "mul", (a, b), grad)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.values / b.values

    def grad(g):
        ga = g / b.values
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._result(out, "div", (a, b), grad)


def neg(a):
    return Tensor._result(-a.values, "neg", (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product; adjoints are ``g @ b.T`` and ``a.T @ g``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def grad(g):
        return g @ b.values.T, a.values.T @ g

    return Tensor._result(a.values @ b.values, "matmul", (a, b), grad)


def transpose(a):
    return Tensor._result(a.values.T, "transpose", (a,), lambda g: (g.T,))


def _index(a, key):
    if not isinstance(key, tuple) or len(key) != 2 or not all(isinstance(k, slice) for k in key):
        raise ContractError("tensors are indexed with a pair of slices, e.g. x[:, 0:4]")
    out = a.values[key]
    if out.size == 0:
        raise ShapeError(f"slice {key} of {a.shape} is empty")

    def grad(g):
        full = np.zeros_like(a.values)
        full[key] = g
        return (full,)

    return Tensor._result(out, "slice", (a,), grad)


def concat(tensors, axis=0):
    """Join tensors along rows (``axis=0``) or columns (``axis=1``)."""
    tensors = [as_tensor(t) for t in tensors]
    other = 1 - axis
    widths = {t.shape[other] for t in tensors}
    if len(widths) != 1:
        raise ShapeError(f"concat along axis {axis}: mismatched shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad(g):
        if axis == 0:
            return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    values = np.concatenate([t.values for t in tensors], axis=axis)
    return Tensor._result(values, "concat", tuple(tensors), grad)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def relu(a):
    mask = a.values > 0
    return Tensor._result(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.values)
    return Tensor._result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    # overflow surfaces as the finiteness error raised by _result
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    if (a.values <= 0).any():
        raise NumericalError("log of a non-positive value")
    return Tensor._result(np.log(a.values), "log", (a,), lambda g: (g / a.values,))


def sqrt(a):
    if (a.values < 0).any():
        raise NumericalError("sqrt of a negative value")
    out = np.sqrt(a.values)
    return Tensor._result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def softplus(a):
    """``log(1 + exp(x))`` without overflow; derivative is the logistic."""
    x = a.values
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    # logistic evaluated on the branch that never overflows
    z = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor._result(out, "softplus", (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a, axis=None):
    """Sum to ``1x1`` (``axis=None``), a row (``axis=0``) or a column (``axis=1``)."""
    shape = a.shape
    if axis is None:
        out = np.array([[a.values.sum()]])
    else:
        out = a.values.sum(axis=axis, keepdims=True)

    def grad(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(out, "sum", (a,), grad)


def mean(a, axis=None):
    count = a.values.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def softmax_rows(x, scale=1.0):
    """Row-wise softmax of ``x / scale``.

    The row maximum is subtracted before exponentiation.
    """
    if not scale > 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    z = x.values / scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner) / scale,)

    return Tensor._result(out, "softmax_rows", (x,), grad)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardise each row (population variance plus ``eps``), then scale and shift."""
    if not eps > 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    cols = x.shape[1]
    if gamma.shape != (1, cols) or beta.shape != (1, cols):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match {x.shape}")
    mu = x.values.mean(axis=1, keepdims=True)
    centered = x.values - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.values + beta.values

    def grad(g):
        dxhat = g * gamma.values
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return Tensor._result(out, "layer_norm", (x, gamma, beta), grad)


def conv1d(x, kernels, bias, stride=1):
    """Valid cross-correlation along the token (row) axis.

    Parameters
    ----------
    x : Tensor
        ``tokens x channels_in``.
    kernels : Tensor
        ``(k * channels_in) x channels_out``; row ``j * channels_in + c``
        holds the weights of tap ``j`` for input channel ``c``.
    bias : Tensor
        ``1 x channels_out``.
    stride : int
        Step between successive output tokens.

    Returns
    -------
    Tensor
        ``((tokens - k) // stride + 1) x channels_out``.
    """
    tokens, cin = x.shape
    taps_rows, cout = kernels.shape
    if taps_rows % cin:
        raise ShapeError(f"conv1d: kernel rows {taps_rows} are not a multiple of {cin} input channels")
    k = taps_rows // cin
    if k > tokens:
        raise ShapeError(f"conv1d: kernel size {k} exceeds {tokens} tokens (input {x.shape})")
    if stride < 1:
        raise ContractError(f"conv1d: stride must be >= 1, got {stride}")
    if bias.shape != (1, cout):
        raise ShapeError(f"conv1d: bias {bias.shape} does not match {cout} output channels")
    n_out = (tokens - k) // stride + 1
    idx = stride * np.arange(n_out)[:, None] + np.arange(k)[None, :]
    patches = x.values[idx].reshape(n_out, k * cin)
    out = patches @ kernels.values + bias.values

    def grad(g):
        dpatches = (g @ kernels.values.T).reshape(n_out, k, cin)
        dx = np.zeros_like(x.values)
        np.add.at(dx, idx, dpatches)
        return dx, patches.T @ g, g.sum(axis=0, keepdims=True)

    return Tensor._result(out, "conv1d", (x, kernels, bias), grad)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f, theta, h=1e-5, vectorized=False, chunk=256):
    """Central-difference gradient of a scalar function.

    Parameters
    ----------
    f : callable
        Maps a parameter vector to a float. With ``vectorized=True`` it maps
        a ``(P, n)`` stack of parameter vectors to ``P`` floats instead.
    theta : array_like
        Point of evaluation, shape ``(n,)``.
    h : float
        Step size.
    vectorized : bool
        Evaluate perturbations in stacks of up to ``chunk`` coordinates.

    Returns
    -------
    numpy.ndarray
        ``(f(theta + h e_i) - f(theta - h e_i)) / (2h)`` for each ``i``.
    """
    if not h > 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    n = theta.size
    out = np.empty(n)
    if not vectorized:
        for i in range(n):
            plus = theta.copy()
            minus = theta.copy()
            plus[i] += h
            minus[i] -= h
            out[i] = (f(plus) - f(minus)) / (2 * h)
        return out
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        m = hi - lo
        stack = np.repeat(theta[None, :], 2 * m, axis=0)
        rows = np.arange(m)
        stack[rows, lo + rows] += h
        stack[m + rows, lo + rows] -= h
        vals = np.asarray(f(stack), dtype=np.float64)
        out[lo:hi] = (vals[:m] - vals[m:]) / (2 * h)
    return out
