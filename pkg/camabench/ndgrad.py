"""Reverse-mode differentiation over dense float64 arrays.

Operations are recorded on a `Graph` tape while they run (the tape is rebuilt
for every batch). Tensors that do not belong to a graph are constants: the same
model code therefore runs with gradients (parameters bound as graph leaves) or
without them (parameters bound as constants).
"""
import hashlib
import logging
import os
from dataclasses import dataclass
from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from scipy import special

from camabench.errors import CamaError, GraphError, MaskError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def debug_enabled() -> bool:
    return os.environ.get('CAMA_DEBUG', '') not in ('', '0')


class Tensor:
    __slots__ = ('data', 'graph', 'index')
    # Makes `ndarray op Tensor` dispatch to the Tensor's reflected operator.
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, graph: Optional['Graph'] = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.graph is not None

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        where = f'node={self.index}' if self.tracked else 'constant'
        return f'Tensor(shape={self.shape}, {where})'

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
        if isinstance(other, Tensor):
            raise TypeError('Division is only supported by a constant scalar')
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    index: int
    inputs: Tuple[int, ...]
    vjp: Optional[VJP]
    name: Optional[str] = None

    @property
    def label(self) -> str:
        return f'{self.op}#{self.index}' if self.name is None else f'{self.op}:{self.name}'


class Graph:
    """A tape of primitive operations in the order they were executed."""

    def __init__(self, debug: Optional[bool] = None):
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}
        self.leaf_shapes: Dict[str, Tuple[int, ...]] = {}
        self.debug = debug_enabled() if debug is None else debug

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, name: str, value: ArrayLike) -> Tensor:
        if name in self.leaves:
            raise GraphError(f'Leaf "{name}" is already registered on this graph')
        index = len(self.nodes)
        self.nodes.append(Node('leaf', index, (), None, name))
        data = np.array(value, dtype=np.float64)
        self.leaves[name] = index
        self.leaf_shapes[name] = data.shape
        return Tensor(data, self, index)

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: VJP) -> Tensor:
        index = len(self.nodes)
        node = Node(op, index, tuple(t.index if t.graph is self else -1 for t in inputs), vjp)
        if self.debug:
            _check_finite(node.label, out)
        self.nodes.append(node)
        return Tensor(out, self, index)


def _check_finite(label: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(label)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value: ArrayLike) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64))


def _graph_of(tensors: Iterable[Tensor]) -> Optional[Graph]:
    graph = None
    for t in tensors:
        if t.graph is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise GraphError('Operands belong to different graphs')
    return graph


def _apply(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: VJP) -> Tensor:
    graph = _graph_of(inputs)
    if graph is None:
        if debug_enabled():
            _check_finite(op, out)
        return Tensor(out)
    return graph.record(op, inputs, out, vjp)


# Primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul', a.shape, b.shape, 'inner dimensions must agree')
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _apply('matmul', (a, b), out, vjp)


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return 'same'
    if b.ndim == 0:
        return 'scalar_b'
    if a.ndim == 0:
        return 'scalar_a'
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return 'bias_b'
    if b.ndim == 2 and a.shape == (b.shape[1],):
        return 'bias_a'
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == f'scalar_{side}':
        return np.asarray(g.sum())
    if kind == f'bias_{side}':
        return g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind('add', a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, kind, 'a'), _unbroadcast(g, kind, 'b')

    return _apply('add', (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind('sub', a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, kind, 'a'), -_unbroadcast(g, kind, 'b')

    return _apply('sub', (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind('mul', a, b)
    if kind.startswith('bias'):
        raise ShapeError('mul', a.shape, b.shape, 'bias broadcasting is only defined for add')
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, kind, 'a'), _unbroadcast(g * a.data, kind, 'b')

    return _apply('mul', (a, b), out, vjp)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _apply('scale', (a,), a.data * factor, lambda g: (g * factor,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _apply('relu', (a,), np.where(positive, a.data, 0.0), lambda g: (g * positive,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _apply('sigmoid', (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _apply('tanh', (a,), out, lambda g: (g * (1.0 - out ** 2),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _apply('exp', (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _apply('log', (a,), out, lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _apply('square', (a,), a.data ** 2, lambda g: (2.0 * g * a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _apply('clip', (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis)
    return _apply('sum', (a,), out, lambda g: (_expand(g, a.shape, axis),))


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)
    return _apply('mean', (a,), out, lambda g: (_expand(g, a.shape, axis) / count,))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
                s != f for i, (s, f) in enumerate(zip(t.shape, first.shape)) if i != axis % first.ndim
        ):
            raise ShapeError('concat', first.shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply('concat', tensors, out, vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError('slice', a.shape, (start, stop), 'column range out of bounds')
    out = a.data[:, start:stop]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _apply('slice', (a,), out, vjp)


def take_rows(a, indices: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if a.ndim == 0 or (indices.size and (indices.min() < 0 or indices.max() >= a.shape[0])):
        raise ShapeError('take_rows', a.shape, indices.shape, 'row index out of bounds')
    out = a.data[indices]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _apply('take_rows', (a,), out, vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError('reshape', a.shape, tuple(shape)) from e
    return _apply('reshape', (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError('transpose', (2,), (a.ndim,), 'expects a matrix')
    return _apply('transpose', (a,), a.data.T.copy(), lambda g: (g.T,))


def softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    out = special.softmax(a.data, axis=axis)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _apply('softmax', (a,), out, vjp)


def log_softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    out = special.log_softmax(a.data, axis=axis)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _apply('log_softmax', (a,), out, vjp)


def logsumexp(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    out = special.logsumexp(a.data, axis=axis)

    def vjp(g):
        weights = np.exp(a.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * weights,)

    return _apply('logsumexp', (a,), out, vjp)


# Graph driving

def forward(
        graph: Graph,
        fn: Callable[..., Union[Tensor, Mapping[str, Tensor]]],
        inputs: Mapping[str, ArrayLike],
        shapes: Optional[Mapping[str, Sequence[int]]] = None,
        **kwargs,
) -> Dict[str, Tensor]:
    """Register `inputs` as named leaves of `graph` and run `fn` on them."""
    for name, shape in (shapes or {}).items():
        if name not in inputs:
            raise GraphError(f'Input "{name}" is missing')
        got = np.shape(inputs[name])
        if tuple(got) != tuple(shape):
            raise ShapeError(name, shape, got)
    leaves = {name: graph.leaf(name, value) for name, value in inputs.items()}
    outputs = fn(leaves, **kwargs)
    if isinstance(outputs, Tensor):
        return {'output': outputs}
    return dict(outputs)


def backward(graph: Graph, output: Tensor) -> Dict[str, np.ndarray]:
    """Gradient of the scalar `output` with respect to every leaf of `graph`."""
    if not isinstance(output, Tensor) or output.graph is not graph:
        raise GraphError('Output node is not on this tape')
    if output.shape != ():
        raise GraphError(f'Backward needs a scalar output, got shape {output.shape}')

    grads: Dict[int, np.ndarray] = {output.index: np.ones(())}
    leaf_grads: Dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes[:output.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.vjp is None:
            leaf_grads[node.index] = g
            continue
        for input_index, input_grad in zip(node.inputs, node.vjp(g)):
            if input_index < 0 or input_grad is None:
                continue
            if input_index in grads:
                grads[input_index] = grads[input_index] + input_grad
            else:
                grads[input_index] = input_grad
    result = {}
    for name, index in graph.leaves.items():
        grad = leaf_grads.get(index)
        # Leaves the output does not depend on get exact zeros.
        result[name] = np.zeros(graph.leaf_shapes[name]) if grad is None else np.asarray(grad, dtype=np.float64)
    return result


def value_and_grad(
        fn: Callable[[Dict[str, Tensor]], Tensor],
        inputs: Mapping[str, ArrayLike],
        debug: Optional[bool] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    graph = Graph(debug=debug)
    output = forward(graph, fn, inputs)['output']
    return output.item(), backward(graph, output)


# Parameters and optimisation

@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise CamaError(f'Adam learning rate must be positive, got {self.learning_rate}')
        for name in ('beta1', 'beta2'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise CamaError(f'Adam {name} must lie in (0, 1), got {value}')


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParameterStore:
    """Named trainable arrays, each owned by exactly one network group."""

    def __init__(self):
        self.entries: Dict[str, np.ndarray] = {}
        self.groups: Dict[str, List[str]] = {}
        self.state: Dict[str, AdamState] = {}
        self._group_of: Dict[str, str] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self):
        sizes = {group: int(np.sum([self.entries[n].size for n in names])) for group, names in self.groups.items()}
        return f'ParameterStore({sizes})'

    def add(self, name: str, group: str, value: ArrayLike) -> np.ndarray:
        if name in self.entries:
            raise CamaError(f'Parameter "{name}" already exists in group "{self._group_of[name]}"')
        data = np.array(value, dtype=np.float64)
        self.entries[name] = data
        self.groups.setdefault(group, []).append(name)
        self._group_of[name] = group
        self.state[name] = AdamState(np.zeros_like(data), np.zeros_like(data))
        return data

    def group_of(self, name: str) -> str:
        return self._group_of[name]

    def names(self, groups: Optional[Iterable[str]] = None) -> List[str]:
        if groups is None:
            return list(self.entries)
        groups = list(groups)
        unknown = [group for group in groups if group not in self.groups]
        if unknown:
            raise MaskError(f'Unknown parameter groups {unknown}; known groups are {sorted(self.groups)}')
        return [name for group in groups for name in self.groups[group]]

    def bind(self, graph: Optional[Graph] = None, groups: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
        """Tensors for every entry: graph leaves for the selected groups, constants otherwise."""
        trainable = set(self.names(groups)) if graph is not None else set()
        return {
            name: graph.leaf(name, value) if name in trainable else Tensor(value)
            for name, value in self.entries.items()
        }

    def select(self, grads: Mapping[str, np.ndarray], groups: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        wanted = self.names(groups)
        return {name: grads[name] for name in wanted if name in grads}

    def checksum(self, group: str) -> str:
        digest = hashlib.sha256()
        for name in self.names([group]):
            value = self.entries[name]
            digest.update(name.encode())
            digest.update(str(value.shape).encode())
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()

    def checksums(self) -> Dict[str, str]:
        return {group: self.checksum(group) for group in self.groups}

    def copy(self) -> 'ParameterStore':
        clone = ParameterStore()
        for group, names in self.groups.items():
            for name in names:
                clone.add(name, group, self.entries[name])
                state = self.state[name]
                clone.state[name] = AdamState(state.m.copy(), state.v.copy(), state.t)
        return clone

    def freeze(self) -> 'ParameterStore':
        """Read-only copy that may be shared between evaluating threads."""
        frozen = self.copy()
        for value in frozen.entries.values():
            value.flags.writeable = False
        return frozen

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.entries.items()}

    def restore(self, snapshot: Mapping[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            if name not in self.entries:
                raise CamaError(f'Snapshot entry "{name}" is not a parameter of this store')
            if value.shape != self.entries[name].shape:
                raise ShapeError(name, self.entries[name].shape, value.shape)
            self.entries[name] = value.copy()


def adam_step(
        store: ParameterStore,
        grads: Mapping[str, np.ndarray],
        cfg: AdamConfig,
        mask: Optional[Iterable[str]] = None,
) -> None:
    """One bias-corrected Adam update of the parameters in the `mask` groups (all when None)."""
    allowed = set(store.names(mask))
    outside = [name for name in grads if name not in allowed]
    if outside:
        foreign = [name for name in outside if name not in store]
        if foreign:
            raise MaskError(f'Gradients supplied for unknown parameters {sorted(foreign)}')
        raise MaskError(
                f'Gradients supplied for parameters outside the update mask {sorted(mask or [])}: {sorted(outside)}'
        )
    missing = allowed.difference(grads)
    if missing:
        raise MaskError(f'Missing gradients for masked parameters {sorted(missing)}')

    for name in store.names(mask):
        param = store.entries[name]
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError(name, param.shape, grad.shape, 'gradient shape')
        state = store.state[name]
        state.t += 1
        state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
        state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad ** 2
        m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
        v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
        store.entries[name] = param - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
