"""Dense tensor kernels with reverse-mode differentiation and seeded streams.

Every public operation returns a new `Tensor` holding 64-bit data. Operations
on tensors that require gradients record their parents and a backward rule;
`Graph.from_loss` orders the recorded nodes topologically and `backward`
walks them in exact reverse order, accumulating adjoints per node.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
import logging
import math

import numpy as np
from scipy.special import erf

from .fm_exceptions import NonFiniteError, ShapeError
from .fm_utilities import stable_hash64

_LOGGER = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class RngStream:
    """Counter-based random stream keyed by (seed, stream id).

    Backed by the Philox counter generator, so a given key yields the same
    sequence on every platform. Named child streams keep independent purposes
    (dropout, mask sampling, data) from interleaving.
    """

    def __init__(self, seed: int, stream_id: int = 0) -> None:
        """Init."""
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._bit_generator = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64)
        )
        self._generator = np.random.Generator(self._bit_generator)

    def __repr__(self) -> str:
        """Return string representation of class."""
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def counter(self) -> int:
        """Return the 256-bit block counter as an integer."""
        words = self._bit_generator.state["state"]["counter"]
        return sum(int(word) << (64 * index) for index, word in enumerate(words))

    def child(self, name: str) -> RngStream:
        """Return the independent stream derived from this one by name."""
        return RngStream(self.seed, stable_hash64(f"{self.stream_id}/{name}"))

    def random(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._generator.random(shape)

    def uniform(self, low: float, high: float, shape: int | tuple[int, ...]) -> np.ndarray:
        """Uniform draws on [low, high)."""
        return self._generator.uniform(low, high, shape)

    def normal(self, scale: float, shape: int | tuple[int, ...]) -> np.ndarray:
        """Zero-mean normal draws."""
        return self._generator.normal(0.0, scale, shape)

    def integers(self, high: int, shape: int | tuple[int, ...] | None = None):
        """Uniform integers on [0, high)."""
        return self._generator.integers(0, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n)."""
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        """Sample indices from range(n)."""
        return self._generator.choice(n, size=size, replace=replace)

    def dirichlet(self, alpha: np.ndarray, size: int | tuple[int, ...]) -> np.ndarray:
        """Dirichlet draws, last axis summing to one."""
        return self._generator.dirichlet(alpha, size)

    def bernoulli(self, prob: np.ndarray) -> np.ndarray:
        """Independent Bernoulli draws as uint8."""
        return (self._generator.random(np.shape(prob)) < prob).astype(np.uint8)


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        _LOGGER.error("Non-finite values produced by %s", op)
        raise NonFiniteError(f"{op} produced non-finite values")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, reversing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense 64-bit tensor, optionally a node of a differentiation graph."""

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        parents: tuple[Tensor, ...] = (),
        backward_rule: BackwardRule | None = None,
        op: str = "leaf",
    ) -> None:
        """Init."""
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward_rule

    def __repr__(self) -> str:
        """Return string representation of class."""
        label = f" {self.name}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        """Return shape."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Return rank."""
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        """Return True for tensors not produced by an operation."""
        return not self._parents

    def item(self) -> float:
        """Return the value of a scalar tensor."""
        return float(self.data)

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: float) -> Tensor:
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        return index(self, key)


def as_tensor(value) -> Tensor:
    """Wrap arrays and scalars as constant tensors."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(
    op: str,
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_rule: BackwardRule,
) -> Tensor:
    """Create an operation result, recording it only when a parent needs grads."""
    _check_finite(op, data)
    if any(parent.requires_grad for parent in parents):
        return Tensor(data, True, None, parents, backward_rule, op)
    return Tensor(data, op=op)


def add(a, b) -> Tensor:
    """Broadcasting elementwise sum."""
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a) -> Tensor:
    """Elementwise negation."""
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Broadcasting elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward_rule(g: np.ndarray):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _node("matmul", a.data @ b.data, (a, b), backward_rule)


def transpose(a, axes: Sequence[int]) -> Tensor:
    """Permute axes."""
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _node(
        "transpose",
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    """Reshape without copying semantics."""
    a = as_tensor(a)
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a, key) -> Tensor:
    """Basic or integer-array indexing."""
    a = as_tensor(a)

    def backward_rule(g: np.ndarray):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _node("index", a.data[key], (a,), backward_rule)


def total(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum over one axis or all entries."""
    a = as_tensor(a)

    def backward_rule(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward_rule)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Mean over one axis or all entries."""
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(total(a, axis, keepdims), 1.0 / count)


def tanh(a) -> Tensor:
    """Elementwise hyperbolic tangent."""
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """Exact Gaussian error linear unit x·Φ(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _node("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def layernorm(x, gain, bias, eps: float) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layernorm: last axis {x.shape} does not match gain {gain.shape} / bias {bias.shape}"
        )
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = _check_finite("layernorm", centered * inv_std)

    def backward_rule(g: np.ndarray):
        g_normed = g * gain.data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return (
            grad_x,
            _unbroadcast(g * normed, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _node("layernorm", normed * gain.data + bias.data, (x, gain, bias), backward_rule)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)
    return _node(
        "softmax",
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def dropout(x, rate: float, rng: RngStream, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate zero."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul(x, keep / (1.0 - rate))


def embedding(weight, ids: np.ndarray) -> Tensor:
    """Gather rows of weight; gradients scatter-add back."""
    return index(as_tensor(weight), np.asarray(ids, dtype=np.int64))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [N, C] logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(labels.size)
    loss = -log_probs[rows, labels].mean()

    def backward_rule(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / labels.size),)

    return _node("cross_entropy", np.asarray(loss), (logits,), backward_rule)


def squared_error(pred, target: np.ndarray) -> Tensor:
    """Mean squared error."""
    diff = add(pred, -np.asarray(target, dtype=np.float64))
    return mean(mul(diff, diff))


GradientMap = dict[Tensor, np.ndarray]


class Graph:
    """Topologically ordered record of the operations leading to a tensor."""

    def __init__(self, nodes: list[Tensor]) -> None:
        """Init."""
        self.nodes = nodes
        self.gradients: dict[int, np.ndarray] = {}

    @classmethod
    def from_loss(cls, loss: Tensor) -> Graph:
        """Collect every node reachable from loss, parents before children."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            stack.extend(
                (parent, False)
                for parent in reversed(node._parents)  # pylint: disable=protected-access
                if parent.requires_grad and id(parent) not in visited
            )
        return cls(order)

    @property
    def leaves(self) -> list[Tensor]:
        """Return differentiable leaves in topological order."""
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]


def backward(graph: Graph, loss: Tensor, wrt: Sequence[Tensor] = ()) -> GradientMap:
    """Accumulate adjoints in reverse topological order.

    Returns a gradient for every differentiable leaf of the graph, plus a zero
    gradient for each tensor in wrt that has no path to the loss.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    adjoints = graph.gradients
    adjoints.clear()
    adjoints[id(loss)] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        grad = adjoints.get(id(node))
        if grad is None or node.is_leaf:
            continue
        parent_grads = node._backward(grad)  # pylint: disable=protected-access
        for parent, parent_grad in zip(node._parents, parent_grads):  # pylint: disable=protected-access
            if not parent.requires_grad or parent_grad is None:
                continue
            if id(parent) in adjoints:
                adjoints[id(parent)] = adjoints[id(parent)] + parent_grad
            else:
                adjoints[id(parent)] = parent_grad
    gradients: GradientMap = {}
    for leaf in graph.leaves:
        gradients[leaf] = _check_finite("backward", adjoints.get(id(leaf), np.zeros_like(leaf.data)))
    for tensor in wrt:
        if tensor not in gradients:
            gradients[tensor] = np.zeros_like(tensor.data)
    return gradients


def gradients(loss: Tensor, wrt: Sequence[Tensor] = ()) -> GradientMap:
    """Trace the graph of loss and run backward."""
    return backward(Graph.from_loss(loss), loss, wrt)
