"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` records the operation that produced it together with a closure
mapping the upstream gradient to one gradient per parent. ``backward()``
collects the reachable nodes into a ``Graph`` ordered by creation sequence,
which is always a valid topological order, and walks it in reverse.
"""

import contextlib
import itertools
import logging
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from errors import (
    DegenerateVarianceError,
    DomainError,
    NumericError,
    ShapeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """n-dimensional float64 array that optionally participates in a graph."""

    # make numpy defer binary operators to Tensor's reflected methods
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self._op = ""
        self._seq = next(_sequence)

    # ------- introspection -------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        suffix = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{suffix})"

    # ------- graph -------
    def backward(self, grad: Optional[np.ndarray] = None) -> "Graph":
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        graph = Graph.from_root(self)
        graph.backward(self, np.asarray(grad, dtype=np.float64))
        return graph

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ------- operators -------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # ------- method forms -------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


class Graph:
    """Nodes reachable from a root, in execution order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: Dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        return cls(sorted(seen.values(), key=lambda t: t._seq))

    def backward(self, root: Tensor, seed: np.ndarray) -> None:
        _accumulate(root, seed)
        for node in reversed(self.nodes):
            if node._grad_fn is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._grad_fn(node.grad)):
                if grad is not None and parent.requires_grad:
                    _accumulate(parent, grad)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != tensor.data.shape:
        raise ShapeError(f"gradient of shape {grad.shape} does not match tensor {tensor.shape}")
    if tensor.grad is None:
        tensor.grad = np.array(grad, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._grad_fn = grad_fn if out.requires_grad else None
    out._op = op
    out._seq = next(_sequence)
    return out


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------- binary elementwise -------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), grad_fn, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn, "matmul")


# ------- unary elementwise -------
def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,), "relu")


def leaky_relu(x, slope: float = 0.3) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    y = np.where(positive, x.data, slope * x.data)
    return _result(y, (x,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min():.6g})")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


_ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "exp": exp,
    "log": log,
    "add": add,
    "mul": mul,
    "sub": sub,
}


def elementwise(op: str, *operands, **kwargs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValidationError(f"unknown elementwise op {op!r}") from None
    return fn(*operands, **kwargs)


# ------- reductions and shape plumbing -------
def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), grad_fn, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, grad_fn, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


# ------- softmax family -------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax received non-finite input")
    y = x.data - logsumexp(x.data, axis=axis, keepdims=True)

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), grad_fn, "log_softmax")


# ------- convolutional stack -------
def conv1d(x, kernels, stride: int = 1) -> Tensor:
    """Valid cross-correlation of [C_in, L] or [N, C_in, L] with [C_out, C_in, K]."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d: expected [N, C, L] input and [O, C, K] kernels, got {x.shape} and {kernels.shape}")
    _, c_in, length = xd.shape
    _, k_in, width = kernels.shape
    if c_in != k_in:
        raise ShapeError(f"conv1d: input {x.shape} has {c_in} channels, kernels {kernels.shape} expect {k_in}")
    if length < width:
        raise ShapeError(f"conv1d: input length {length} is shorter than kernel width {width}")
    windows = sliding_window_view(xd, width, axis=2)[:, :, ::stride, :]
    out_len = windows.shape[2]
    out = np.einsum("nclk,ock->nol", windows, kernels.data, optimize=True)

    def grad_fn(g):
        g3 = g[None] if squeeze else g
        grad_k = np.einsum("nclk,nol->ock", windows, g3, optimize=True)
        grad_x = np.zeros_like(xd)
        for k in range(width):
            taps = slice(k, k + stride * (out_len - 1) + 1, stride)
            grad_x[:, :, taps] += np.einsum("oc,nol->ncl", kernels.data[:, :, k], g3, optimize=True)
        return (grad_x[0] if squeeze else grad_x), grad_k

    return _result(out[0] if squeeze else out, (x, kernels), grad_fn, "conv1d")


def batchnorm1d(
    x,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [N, C] or [N, C, L].

    In training mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    x = as_tensor(x)
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 3:
        axes, view = (0, 2), (1, -1, 1)
    else:
        raise ShapeError(f"batchnorm1d: expected [N, C] or [N, C, L], got {x.shape}")
    count = x.data.size // x.shape[1]
    if training:
        if x.shape[0] < 2:
            raise DegenerateVarianceError(f"batchnorm1d in train mode needs batch size > 1, got {x.shape[0]}")
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean
        running_var *= 1.0 - momentum
        running_var += momentum * batch_var * count / max(count - 1, 1)
    else:
        batch_mean, batch_var = running_mean.copy(), running_var.copy()
    inv_std = (1.0 / np.sqrt(batch_var + eps)).reshape(view)
    x_hat = (x.data - batch_mean.reshape(view)) * inv_std
    scale = gamma.data.reshape(view).copy()
    out = scale * x_hat + beta.data.reshape(view)

    def grad_fn(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        d_hat = g * scale
        if training:
            grad_x = inv_std / count * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = d_hat * inv_std
        return grad_x, grad_gamma, grad_beta

    return _result(out, (x, gamma, beta), grad_fn, "batchnorm1d")


def maxpool1d(x, window: int = 2, stride: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < window:
        raise ShapeError(f"maxpool1d: length {x.shape[-1]} is shorter than window {window}")
    windows = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :]
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]
    out_len = out.shape[-1]

    def grad_fn(g):
        grad = np.zeros_like(x.data)
        for k in range(window):
            taps = slice(k, k + stride * (out_len - 1) + 1, stride)
            grad[..., taps] += np.where(winner == k, g, 0.0)
        return (grad,)

    return _result(out, (x,), grad_fn, "maxpool1d")


def dropout(x, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the identity in eval mode."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ------- losses -------
def mse(a, b) -> Tensor:
    """Mean over the batch (axis 0) of the per-sample squared L2 norm."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    batch = a.shape[0] if a.ndim else 1
    diff = a.data - b.data

    def grad_fn(g):
        local = 2.0 * diff / batch * g
        return local, -local

    return _result(np.asarray((diff * diff).sum() / batch), (a, b), grad_fn, "mse")


def one_hot(labels: Sequence[int], n_classes: int = 3) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of one-hot ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {y.shape} differ")
    bad = ~(np.all((y == 0.0) | (y == 1.0), axis=1) & (y.sum(axis=1) == 1.0))
    if np.any(bad):
        raise ValidationError(f"label row {int(np.argmax(bad))} is not one-hot")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy received non-finite logits")
    batch = logits.shape[0]
    log_probs = logits.data - logsumexp(logits.data, axis=1, keepdims=True)

    def grad_fn(g):
        return ((np.exp(log_probs) - y) / batch * g,)

    return _result(np.asarray(-(y * log_probs).sum() / batch), (logits,), grad_fn, "cross_entropy")


# ------- finite-difference oracle -------
def check_gradients(
    fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, seed: int = 0
) -> float:
    """Largest relative error between backprop and central differences.

    Non-scalar outputs are reduced with fixed random weights, so the check
    covers the full Jacobian-vector product.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    sum_(mul(out, weights)).backward()

    def probe() -> float:
        return float(np.sum(fn(*inputs).data * weights))

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros(t.data.size)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = probe()
            flat[i] = original - h
            minus = probe()
            flat[i] = original
            numeric[i] = (plus - minus) / (2.0 * h)
        numeric = numeric.reshape(t.shape)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
