"""
Dense tensor type and the gradient tape that records operations on it.

Operations only record onto a tape while one is active in the current
thread (``with GradTape() as tape: ...``); outside a tape every op runs in
inference mode and produces plain tensors.
"""
import threading
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.shared.domain.exceptions import ContractError, ShapeError

DEFAULT_DTYPE = np.float32
SUPPORTED_DTYPES = (np.float32, np.float64)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_local = threading.local()


def _tape_stack() -> List["GradTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["GradTape"]:
    """Return the innermost active tape of the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    Rank-N float array with optional gradient participation.

    Canonical layouts are N×C×H×W for per-frame maps and B×T×C×H×W for
    sequences (flattened to (B·T)×C×H×W inside the network).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in SUPPORTED_DTYPES:
            array = array.astype(DEFAULT_DTYPE)
        if any(extent < 1 for extent in array.shape):
            raise ShapeError("tensor extents must be strictly positive", array.shape)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["GradTape"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an op result without re-validating it."""
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar, delegated to the functional ops

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from . import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from . import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from . import functional as F
        return F.power(self, exponent)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def astype(self, dtype) -> "Tensor":
        from . import functional as F
        return F.cast(self, dtype)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeRecord(NamedTuple):
    """One recorded operation: its inputs, output and vector-Jacobian product."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class GradTape:
    """
    Wengert list of operations executed while the tape is active.

    ``backward`` walks the records in strict reverse order and sums the
    contributions of every use of a tensor.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._bound: List[Tensor] = []
        self._active = False

    @property
    def is_active(self) -> bool:
        return self._active

    def __enter__(self) -> "GradTape":
        if self._active:
            raise ContractError("tape is already active")
        self._active = True
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self._active = False
        for tensor in self._bound:
            if tensor._tape is self:
                tensor._tape = None
        self._bound.clear()

    def _bind(self, tensor: Tensor) -> None:
        owner = tensor._tape
        if owner is self:
            return
        if owner is not None and owner.is_active:
            raise ContractError(
                f"tensor {tensor.name or tuple(tensor.shape)} already participates in another active tape"
            )
        tensor._tape = self
        self._bound.append(tensor)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        """Append an operation; called by the functional ops."""
        for tensor in inputs:
            if tensor.requires_grad:
                self._bind(tensor)
        self._bind(output)
        self.records.append(TapeRecord(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Back-propagate from a scalar loss.

        Populates ``.grad`` (accumulating) on every leaf tensor that requires
        gradients and is reachable from ``loss``; returns the id→gradient map
        for all reachable tensors.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor recorded on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: Dict[int, Tensor] = {}

        for record in reversed(self.records):
            produced.add(id(record.output))
            upstream = grads.get(id(record.output))
            if upstream is None:
                continue
            contributions = record.backward(upstream)
            for tensor, contribution in zip(record.inputs, contributions):
                if contribution is None or not tensor.requires_grad:
                    continue
                if contribution.shape != tensor.shape:
                    raise ShapeError(f"gradient shape mismatch in '{record.op}'", contribution.shape, tensor.shape)
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution
                leaves[key] = tensor

        for key, tensor in leaves.items():
            if key in produced:
                continue
            grad = grads[key].astype(tensor.dtype, copy=False)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad

        self.grads = grads
        return grads

    def gradient(self, tensor: Tensor) -> Optional[np.ndarray]:
        """Gradient of the last backward pass with respect to any recorded tensor."""
        return self.grads.get(id(tensor))


def backward(tape: GradTape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Functional form of ``GradTape.backward``."""
    return tape.backward(loss)


def as_tensor(value: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    """Coerce arrays and scalars into a non-differentiable tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def zeros(shape: Iterable[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype))


def ones(shape: Iterable[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype))
