"""
Tensor Core - Dense tensors with reverse-mode automatic differentiation.

This module provides the small tensor engine the rest of the package is built on:
a numpy-backed Tensor, an append-only Tape that records differentiable operations,
the operations the alignment and emotion models need (matmul, conv1d, maxpool1d,
softmax, activations, dropout, reductions, indexing), the Adam optimizer, global
gradient-norm clipping and a central finite-difference gradient checker.

Usage:
    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss)
    grads[w]  # ndarray with w's shape
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError, NumericError

logger = logging.getLogger(__name__)

Index = Union[int, slice, np.ndarray, Tuple]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def counter_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox (counter-based) generator for an independent sub-stream of `seed`."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def _check_finite(data: np.ndarray, kind: str):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{kind} produced non-finite values")


class Tensor:
    """Dense float64 tensor that can take part in reverse-mode differentiation."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        _check_finite(array, "tensor construction")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.node_id = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # Operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def as_tensor(value) -> Tensor:
    """Wrap scalars and arrays as constants; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class TapeNode:
    """One recorded operation."""
    kind: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    backward: Optional[BackwardFn] = None


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    """Innermost active tape on this thread, if any."""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations, in topological order.

    A tape is single-threaded. Parameters may be shared between tapes living on
    different threads: leaves are tracked per tape, not on the tensor.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._leaf_ids: Dict[int, int] = {}
        self._leaf_refs: List[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _local.stack.pop()

    def __len__(self):
        return len(self.nodes)

    def node_of(self, tensor: Tensor) -> Optional[int]:
        """Node id of `tensor` on this tape, or None if it is not recorded here."""
        leaf = self._leaf_ids.get(id(tensor))
        if leaf is not None:
            return leaf
        if tensor._tape is self:
            return tensor.node_id
        return None

    def _input_id(self, tensor: Tensor) -> Optional[int]:
        if not tensor.requires_grad:
            return None
        node = self.node_of(tensor)
        if node is None:
            node = self._append(TapeNode("leaf", (), tensor.shape))
            self._leaf_ids[id(tensor)] = node
            self._leaf_refs.append(tensor)
            if tensor._tape is None:
                tensor.node_id = node
        return node

    def _append(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


def _record(kind: str, data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: BackwardFn) -> Tensor:
    _check_finite(data, kind)
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    inputs = tuple(tape._input_id(p) for p in parents)
    out.requires_grad = True
    out.node_id = tape._append(TapeNode(kind, inputs, data.shape, backward_fn))
    out._tape = tape
    return out


class Gradients:
    """Gradient slots produced by backward(), keyed by node id."""

    def __init__(self, tape: Tape, slots: Dict[int, np.ndarray]):
        self.tape = tape
        self.slots = slots

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        node = self.tape.node_of(tensor)
        if node is None or node not in self.slots:
            return np.zeros(tensor.shape)
        return self.slots[node]

    def collect(self, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        """Gradients for a named parameter set (zeros for disconnected ones)."""
        return {name: self[p] for name, p in params.items()}


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(node) backwards over the tape, seeding 1.0 at the loss."""
    if loss.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    slots: Dict[int, np.ndarray] = {}
    start = tape.node_of(loss)
    if start is None:
        return Gradients(tape, slots)

    slots[start] = np.ones(loss.shape)
    for node_id in range(start, -1, -1):
        grad = slots.get(node_id)
        node = tape.nodes[node_id]
        if grad is None or node.backward is None:
            continue
        input_grads = node.backward(grad)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_id is None or input_grad is None:
                continue
            if input_id in slots:
                slots[input_id] = slots[input_id] + input_grad
            else:
                slots[input_id] = np.array(input_grad, dtype=np.float64)
    return Gradients(tape, slots)


# ---------------------------------------------------------------------------
# Elementwise and broadcasting arithmetic
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _record("clip", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _record("relu", a.data * positive, (a,), lambda g: (g * positive,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _record("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    a = as_tensor(a)
    if a.size == 0 or a.ndim == 0:
        raise ArgumentError("softmax: empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), _backward)


def dropout(a, p: float, train_mode: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) in train mode; identity in eval."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        return a
    if rng is None:
        raise ArgumentError("dropout in train mode needs a random generator")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record("dropout", a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra, shape and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index: Index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back (duplicates accumulate)."""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=np.float64)

    def _backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", out, (a,), _backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ArgumentError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: np.split(g, bounds, axis=axis))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ArgumentError("stack: no tensors given")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: shapes differ {shapes}") from None
    count = len(tensors)
    return _record("stack", out, tensors,
                   lambda g: [np.take(g, i, axis=axis) for i in range(count)])


def tensor_sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record("sum", out, (a,), _backward)


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ArgumentError("mean over an empty axis")
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# Convolution and pooling over time
# ---------------------------------------------------------------------------

def same_padding(kernel_size: int) -> Tuple[int, int]:
    """Zero padding (left, right) that keeps length for stride 1."""
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


def conv1d(x, kernels, stride: int = 1, padding: str = "same", bias=None) -> Tensor:
    """Multi-channel 1-D cross-correlation.

    x is (C_in, L), kernels (C_out, C_in, K), optional bias (C_out,).
    Returns (C_out, L').
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ArgumentError(f"conv1d: stride must be >= 1, got {stride}")
    if x.ndim != 2 or kernels.ndim != 3 or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernels {kernels.shape}")
    if padding == "same":
        left, right = same_padding(kernels.shape[2])
    elif padding == "valid":
        left, right = 0, 0
    else:
        raise ArgumentError(f"conv1d: unknown padding '{padding}'")

    c_in, length = x.shape
    k = kernels.shape[2]
    if k > length + left + right:
        raise DimensionError(
            f"conv1d: kernel of length {k} exceeds padded input of length {length + left + right}")

    padded = np.pad(x.data, ((0, 0), (left, right)))
    windows = sliding_window_view(padded, k, axis=1)[:, ::stride, :]  # (C_in, L', K)
    out_len = windows.shape[1]
    out = np.tensordot(kernels.data, windows, axes=([1, 2], [0, 2]))  # (C_out, L')

    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernels.shape[0],):
            raise DimensionError(f"conv1d: bias {bias.shape} does not match {kernels.shape[0]} channels")
        out = out + bias.data[:, None]
        parents.append(bias)

    def _backward(g):
        grad_kernels = np.tensordot(g, windows, axes=([1], [1]))  # (C_out, C_in, K)
        columns = np.tensordot(kernels.data, g, axes=([0], [0]))  # (C_in, K, L')
        grad_padded = np.zeros_like(padded)
        span = stride * (out_len - 1) + 1
        for offset in range(k):
            grad_padded[:, offset:offset + span:stride] += columns[:, offset, :]
        grad_x = grad_padded[:, left:left + length]
        grads = [grad_x, grad_kernels]
        if bias is not None:
            grads.append(g.sum(axis=1))
        return grads

    return _record("conv1d", out, parents, _backward)


def maxpool1d(x, kernel: int, stride: int) -> Tensor:
    """Per-channel window maximum over time; ties route gradient to the first occurrence."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"maxpool1d expects (C, L), got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ArgumentError("maxpool1d: kernel and stride must be >= 1")
    channels, length = x.shape
    if kernel > length:
        raise DimensionError(f"maxpool1d: kernel {kernel} exceeds length {length}")

    windows = sliding_window_view(x.data, kernel, axis=1)[:, ::stride, :]
    winners = windows.argmax(axis=2)  # first occurrence on ties
    out = np.take_along_axis(windows, winners[:, :, None], axis=2)[:, :, 0]
    positions = winners + (np.arange(windows.shape[1]) * stride)[None, :]
    rows = np.arange(channels)[:, None]

    def _backward(g):
        grad = np.zeros(x.shape)
        if stride >= kernel:
            grad[rows, positions] = g
        else:
            np.add.at(grad, (np.broadcast_to(rows, positions.shape), positions), g)
        return (grad,)

    return _record("maxpool1d", np.ascontiguousarray(out), (x,), _backward)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: Sequence[int],
                   fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=tuple(shape)))


def zeros(shape: Sequence[int], requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments per named parameter plus the shared step counter."""
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState) -> Dict[str, Tensor]:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    for name, param in params.items():
        grad = grads.get(name)
        if grad is not None and np.shape(grad) != param.shape:
            raise DimensionError(
                f"adam_step: gradient {np.shape(grad)} does not match parameter '{name}' {param.shape}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(param.shape)
        m = state.m.get(name, np.zeros(param.shape))
        v = state.v.get(name, np.zeros(param.shape))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        param.data = param.data - update
    return params


def global_grad_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Rescale all gradients together when their global L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ArgumentError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                       target: int, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar fn(*inputs) w.r.t. inputs[target]."""
    tensor = inputs[target]
    original = tensor.data
    grad = np.zeros(original.shape)
    flat = original.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        tensor.data = bumped.reshape(original.shape)
        plus = fn(*inputs).item()
        bumped[i] = flat[i] - h
        tensor.data = bumped.reshape(original.shape)
        minus = fn(*inputs).item()
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    tensor.data = original
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-8)
    return float(np.linalg.norm(analytic - numeric)) / scale


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                   h: float = 1e-5, wrt: Optional[Iterable[int]] = None) -> float:
    """Largest relative error between tape gradients and central differences."""
    targets = list(range(len(inputs))) if wrt is None else list(wrt)
    for i in targets:
        inputs[i].requires_grad = True
    with Tape() as tape:
        loss = fn(*inputs)
    grads = backward(tape, loss)
    worst = 0.0
    for i in targets:
        numeric = numerical_gradient(fn, inputs, i, h=h)
        worst = max(worst, relative_error(grads[inputs[i]], numeric))
    return worst
