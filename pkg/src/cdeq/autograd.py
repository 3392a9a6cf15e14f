"""Minimal reverse-mode autodiff over float64 numpy arrays.

The primitive set is deliberately closed: matmul/linear, bias add, elementwise
add/sub/mul, tanh, relu, concat, sum, mean, mse, l1, softmax cross-entropy and
stopgrad. Broadcasting is limited to leading-axis expansion (row vectors and
per-row scalars against a batch).
"""

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError


class Node:
    __slots__ = ("value", "parents", "grad", "name", "_backward", "requires_grad")

    def __init__(self, value, parents=(), backward=None, name=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self._backward = backward
        self.grad = None
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name=None):
    return Node(np.array(value, dtype=np.float64), name=name, requires_grad=True)


def const(value):
    if isinstance(value, Node):
        return value
    return Node(value, requires_grad=False)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value, parents, backward):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Node(value, requires_grad=False)
    return Node(value, parents, backward)


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = const(a), const(b)
    out_value = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out_value, (a, b), backward)


def bias_add(x, b):
    """``x + b`` with ``b`` broadcast over the leading (batch) axis."""
    x, b = const(x), const(b)
    if b.value.ndim != 1 or x.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"bias of shape {b.shape} does not fit {x.shape}")
    return add(x, b)


def sub(a, b):
    a, b = const(a), const(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b):
    a, b = const(a), const(b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), backward)


def matmul(a, b):
    a, b = const(a), const(b)
    if a.value.ndim not in (1, 2) or b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.value.ndim == 1:
            return g @ b.value.T, np.outer(a.value, g)
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), backward)


def linear(x, W):
    """``x @ W.T`` -- applies a ``(out, in)`` weight matrix to row vectors."""
    x, W = const(x), const(W)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"weight {W.shape} does not accept inputs {x.shape}")

    def backward(g):
        gx = g @ W.value
        gW = np.outer(g, x.value) if x.value.ndim == 1 else g.T @ x.value
        return gx, gW

    return _make(x.value @ W.value.T, (x, W), backward)


def tanh(x):
    x = const(x)
    y = np.tanh(x.value)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), backward)


def relu(x):
    x = const(x)
    mask = x.value > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.value, 0.0), (x,), backward)


def identity(x):
    return const(x)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "identity": identity}


def concat(parts, axis=-1):
    parts = [const(p) for p in parts]
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, parts, backward)


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = const(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.value), (x,), backward)


def mean(x):
    x = const(x)
    n = x.value.size

    def backward(g):
        return (np.full(x.shape, g / n),)

    return _make(np.mean(x.value), (x,), backward)


def mse(a, b):
    """Mean over all elements of ``(a - b)**2``."""
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size

    def backward(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return _make(np.mean(diff * diff), (a, b), backward)


def l1(a, b):
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1 operands differ: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size

    def backward(g):
        ga = g * np.sign(diff) / n
        return ga, -ga

    return _make(np.mean(np.abs(diff)), (a, b), backward)


def row_mse(a, b):
    """Per-row mean squared error, shape ``(B,)``."""
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    d = diff.shape[-1]

    def backward(g):
        ga = g[..., None] * 2.0 * diff / d
        return ga, -ga

    return _make(np.mean(diff * diff, axis=-1), (a, b), backward)


def row_l1(a, b):
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1 operands differ: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    d = diff.shape[-1]

    def backward(g):
        ga = g[..., None] * np.sign(diff) / d
        return ga, -ga

    return _make(np.mean(np.abs(diff), axis=-1), (a, b), backward)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels, reduce=True):
    """Cross-entropy of integer ``labels`` under ``logits`` (rows = samples).

    ``reduce=False`` returns the per-row losses.
    """
    logits = const(logits)
    labels = np.asarray(labels, dtype=np.int64)
    single = logits.value.ndim == 1
    L = np.atleast_2d(logits.value)
    lab = np.atleast_1d(labels)
    n_classes = L.shape[-1]
    if lab.shape[0] != L.shape[0]:
        raise ShapeError("one label per logit row is required")
    if np.any(lab < 0) or np.any(lab >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    logp = log_softmax(L)
    rows = np.arange(L.shape[0])
    per_row = -logp[rows, lab]
    probs = np.exp(logp)
    onehot = np.zeros_like(L)
    onehot[rows, lab] = 1.0

    if reduce:
        def backward(g):
            gl = g * (probs - onehot) / L.shape[0]
            return (gl[0] if single else gl,)

        return _make(per_row.mean(), (logits,), backward)

    def backward_rows(g):
        gl = g[:, None] * (probs - onehot)
        return (gl[0] if single else gl,)

    return _make(per_row[0] if single else per_row, (logits,), backward_rows)


def stopgrad(x):
    """Forward identity that blocks every gradient."""
    return Node(const(x).value.copy(), requires_grad=False)


# ---------------------------------------------------------------- backward


def _topological(root):
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate gradients of a scalar ``loss`` into every reachable node.

    Parameters
    ----------
    loss : Node
        scalar-valued output
    params : dict[str, Node], optional
        leaves to report; ones the loss does not reach get zero gradient.

    Returns
    -------
    dict[str, ndarray]
        gradient per entry of ``params`` (empty dict when ``params`` is None)
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.value).all():
        raise NumericalError("loss is not finite")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(parent.value.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    if params is None:
        return {}
    return {
        name: (node.grad.copy() if node.grad is not None else np.zeros_like(node.value))
        for name, node in params.items()
    }


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameter arrays plus optimiser state (Adam moments, step count)."""

    def __init__(self, values=None):
        self.values = {k: np.array(v, dtype=np.float64) for k, v in (values or {}).items()}
        self.m = {}
        self.v = {}
        self.step = 0

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        self.values[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def names(self):
        return list(self.values)

    def leaves(self, prefix=""):
        """Fresh trainable graph leaves, one per parameter."""
        return {k: param(v, name=prefix + k) for k, v in self.values.items()}

    def constants(self):
        return {k: const(v) for k, v in self.values.items()}

    def copy(self):
        out = ParamStore(self.values)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out

    def same_layout(self, other):
        return self.names() == other.names() and all(
            self.values[k].shape == other.values[k].shape for k in self.values
        )


def _check_grads(store, grads):
    for k, g in grads.items():
        if k not in store.values:
            raise ShapeError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != store.values[k].shape:
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {store.values[k].shape} for {k!r}")


def sgd_step(store, grads, lr):
    _check_grads(store, grads)
    for k, g in grads.items():
        store.values[k] = store.values[k] - lr * g
    store.step += 1


def adam_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    _check_grads(store, grads)
    store.step += 1
    t = store.step
    for k, g in grads.items():
        m = beta1 * store.m.get(k, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * store.v.get(k, np.zeros_like(g)) + (1.0 - beta2) * g * g
        store.m[k], store.v[k] = m, v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        store.values[k] = store.values[k] - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- gradient check


def finite_difference_check(fn, params, step=1e-5):
    """Compare reverse-mode gradients of ``fn`` with central differences.

    Parameters
    ----------
    fn : callable
        maps ``dict[str, Node]`` to a scalar Node
    params : dict[str, ndarray]
        point at which to differentiate
    step : float

    Returns
    -------
    float
        max over named parameters of ``||analytic - numeric|| /
        max(||analytic||, ||numeric||, 1e-8)``
    """
    if step <= 0:
        raise ValidationError("finite-difference step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: param(v, name=k) for k, v in params.items()}
    analytic = backward(fn(leaves), leaves)

    def evaluate(values):
        out = fn({k: const(v) for k, v in values.items()}).value
        if not np.all(np.isfinite(out)):
            raise NumericalError("function evaluation is not finite")
        return float(out)

    worst = 0.0
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = numeric.reshape(-1)
        for i in range(value.size):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name].reshape(-1)[i] += step
            minus[name].reshape(-1)[i] -= step
            flat[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        a = np.linalg.norm(analytic[name])
        n = np.linalg.norm(numeric)
        err = np.linalg.norm(analytic[name] - numeric) / max(a, n, 1e-8)
        worst = max(worst, float(err))
    return worst
