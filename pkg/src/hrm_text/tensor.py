"""
Dense tensors with reverse-mode differentiation

Operations record onto the innermost active `Tape` whenever one of their inputs
requires grad. A tape lives for one optimization step:

```
with Tape() as tape:
    loss = (x * x).sum()
grads = tape.backward(loss)
grads.of(x)  # 2x
```

Broadcasting between differentiable operands is restricted to two forms:
leading expansion (the smaller shape is a suffix of the larger) and trailing
expansion (equal rank, the smaller shape ends in a run of size-1 extents).
Every operation raises `NonFiniteError` naming itself when it produces NaN/Inf.
"""


import contextlib
import itertools
import threading
from collections.abc import Callable
from collections.abc import Iterator
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from hrm_text.errors import ContractError
from hrm_text.errors import DegenerateRowError
from hrm_text.errors import DimensionError
from hrm_text.errors import NonFiniteError


class Precision(IntEnum):
    SINGLE = 32
    DOUBLE = 64

    @property
    def dtype(self) -> type:
        return np.float64 if self is Precision.DOUBLE else np.float32


_node_ids = itertools.count(1)
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, 'tapes', None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> 'Tape | None':
    stack = _tape_stack()
    return stack[-1] if stack else None


def default_precision() -> Precision:
    return getattr(_local, 'precision', Precision.SINGLE)


def set_precision(bits: int | Precision) -> None:
    """
    Sets the precision new tensors are created with on this thread
    """
    _local.precision = Precision(bits)


@contextlib.contextmanager
def precision(bits: int | Precision) -> Iterator[Precision]:
    previous = default_precision()
    set_precision(bits)
    try:
        yield Precision(bits)
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Suspends recording; values are unchanged
    """
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """
    Dense real array with optional tape participation
    """

    __slots__ = ('data', 'requires_grad', 'node_id', 'name')

    # Keeps `ndarray * Tensor` dispatching to Tensor.__rmul__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            dtype = default_precision().dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> 'Tensor':
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.node_id = next(_node_ids)
        tensor.name = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f' name={self.name!r}' if self.name else ''
        return f'<Tensor shape={self.shape} dtype={self.dtype}{label} requires_grad={self.requires_grad}>'

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> 'Tensor':
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> 'Tensor':
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1: int, axis2: int) -> 'Tensor':
        return swapaxes(self, axis1, axis2)


@dataclass(frozen=True)
class OpRecord:
    op: str
    output: int
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Gradients(Mapping):
    """
    Gradient accumulators keyed by node id
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, node_id: int) -> np.ndarray:
        return self._grads[node_id]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def of(self, tensor: Tensor) -> np.ndarray:
        """
        Gradient of a tensor; zeros when no path reached it
        """
        grad = self._grads.get(tensor.node_id)
        if grad is None:
            return np.zeros_like(tensor.data)
        return np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)

    def named(self, tensors: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self.of(tensor) for name, tensor in tensors.items()}


class Tape:
    """
    Ordered operation records of one step

    Records are appended in execution order, so reverse replay visits every
    node after all of its consumers.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, record: OpRecord) -> None:
        self.records.append(record)

    def backward(self, loss: Tensor) -> Gradients:
        if loss.size != 1:
            raise ContractError(f'backward expects a scalar loss, got shape {loss.shape}')

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}

        for record in reversed(self.records):
            grad_out = grads.pop(record.output, None)
            if grad_out is None:
                continue
            input_grads = record.backward(grad_out)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                existing = grads.get(tensor.node_id)
                grads[tensor.node_id] = grad if existing is None else existing + grad

        return Gradients(grads)


def _check_finite(op: str, array: np.ndarray) -> None:
    if not np.isfinite(array).all():
        raise NonFiniteError(op)


def _result(op: str, array: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(op, array)
    tape = active_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, requires_grad)
    if requires_grad:
        tape.record(OpRecord(op, out.node_id, inputs, backward))
    return out


def _coerce(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _expands_to(small: tuple, big: tuple) -> bool:
    if len(small) < len(big):
        return big[len(big) - len(small):] == small
    if len(small) > len(big):
        return False
    for axis, (s, b) in enumerate(zip(small, big)):
        if s != b:
            return all(extent == 1 for extent in small[axis:])
    return True


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if _expands_to(b, a):
        return a
    if _expands_to(a, b):
        return b
    raise DimensionError(f'{op}: cannot broadcast {a} with {b}')


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(axis for axis, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _coerce(a, b if isinstance(b, Tensor) else None), _coerce(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape('add', a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result('add', a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b if isinstance(b, Tensor) else None), _coerce(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape('sub', a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result('sub', a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b if isinstance(b, Tensor) else None), _coerce(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape('mul', a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result('mul', a.data * b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return _result('scale', x.data * factor, (x,), backward)


def _sigmoid(array: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -array))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result('sigmoid', s, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _result('silu', x.data * s, (x,), backward)


def rsqrt(x: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(x.data)

    def backward(g):
        return (g * -0.5 * y * y * y,)

    return _result('rsqrt', y, (x,), backward)


_ELEMENTWISE = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'sigmoid': sigmoid,
    'silu': silu,
    'scale': scale,
}


def elementwise(op: str, *inputs) -> Tensor:
    """
    Dispatches a named pointwise operation
    """
    try:
        function = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f'Invalid elementwise op "{op}"') from None
    return function(*inputs)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes

    `b` is either a matrix shared across the leading axes of `a`, or has the
    same leading axes as `a`.
    """
    a, b = _coerce(a), _coerce(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f'matmul: operands need rank >= 2, got {a.shape} and {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul: inner extents differ, {a.shape} @ {b.shape}')
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f'matmul: leading extents differ, {a.shape} @ {b.shape}')

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            grad_b = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return _result('matmul', np.matmul(a.data, b.data), (a, b), backward)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result('sum', x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _result('mean', x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _result('reshape', x.data.reshape(shape), (x,), backward)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _result('swapaxes', np.swapaxes(x.data, axis1, axis2), (x,), backward)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if not _expands_to(x.shape, shape):
        raise DimensionError(f'broadcast_to: cannot expand {x.shape} to {shape}')

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _result('broadcast_to', np.broadcast_to(x.data, shape).copy(), (x,), backward)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """
    Softmax over the last axis restricted to `mask`; masked entries are exactly 0
    """
    try:
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    except ValueError:
        raise DimensionError(f'masked_softmax: mask {np.shape(mask)} does not fit logits {logits.shape}') from None
    if not allowed.any(axis=-1).all():
        raise DegenerateRowError('masked_softmax: a row has no allowed position')

    shifted = np.where(allowed, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    probs = weights / weights.sum(axis=-1, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _result('masked_softmax', probs, (logits,), backward)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result('log_softmax', out, (x,), backward)


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """
    Picks one entry of the last axis per leading position
    """
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f'take_last: index {index.shape} does not match {x.shape[:-1]}')
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, index[..., None], g[..., None], axis=-1)
        return (grad,)

    return _result('take_last', picked, (x,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f'embedding: ids outside [0, {weight.shape[0]})')

    def backward(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return _result('embedding', weight.data[ids], (weight,), backward)


def detach(x: Tensor) -> Tensor:
    """
    Same values, severed from the tape
    """
    return Tensor._wrap(x.data.copy(), False)


def numerical_gradient(
    fn: Callable[[], Tensor],
    array: np.ndarray,
    eps: float = 1e-5,
    indices: Sequence[tuple] | None = None
) -> np.ndarray:
    """
    Central-difference gradient of scalar `fn()` w.r.t. entries of `array`

    `array` is perturbed in place and restored; only `indices` are filled when given.
    """
    grad = np.zeros_like(array)
    if indices is None:
        indices = list(np.ndindex(array.shape))
    with no_grad():
        for index in indices:
            original = array[index]
            array[index] = original + eps
            plus = fn().item()
            array[index] = original - eps
            minus = fn().item()
            array[index] = original
            grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-3,
    samples: int | None = None,
    seed: int = 0
) -> float:
    """
    Largest relative error between tape gradients and central differences

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    With `samples`, that many random entries per tensor are checked.
    """
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor in tensors:
        all_indices = list(np.ndindex(tensor.shape))
        if samples is not None and samples < len(all_indices):
            chosen = rng.choice(len(all_indices), size=samples, replace=False)
            indices = [all_indices[i] for i in sorted(chosen)]
        else:
            indices = all_indices
        analytic = grads.of(tensor)
        numeric = numerical_gradient(fn, tensor.data, eps, indices)
        for index in indices:
            a, n = float(analytic[index]), float(numeric[index])
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))
    return worst
