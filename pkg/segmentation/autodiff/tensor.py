## segmentation/autodiff/tensor.py

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from segmentation.exceptions import PreconditionError

logger = logging.getLogger(__name__)

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def current_tape() -> Optional["Tape"]:
    """Return the innermost tape active on this thread, if any."""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Feature maps are (batch, channels, height, width), kernels are
    (out_channels, in_channels, kh, kw), biases are (out_channels,) and
    losses are rank 0. A tensor created with ``requires_grad=True`` starts
    with a zero gradient buffer of the same shape.
    """

    # Makes ``ndarray * Tensor`` fall through to Tensor.__rmul__.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._tape: Optional["Tape"] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64, order="C")
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @classmethod
    def zeros(cls, shape: Tuple[int, ...], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise PreconditionError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Arithmetic delegates to the recorded ops.
    def __add__(self, other):
        from segmentation.autodiff import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from segmentation.autodiff import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from segmentation.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from segmentation.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from segmentation.autodiff import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from segmentation.autodiff import ops

        return ops.mul(other, self)

    def __neg__(self):
        from segmentation.autodiff import ops

        return ops.scale(self, -1.0)


@dataclass
class TapeRecord:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the block whose
    inputs require gradients appends one record. Records are appended in
    execution order, so inputs always precede the ops that consume them.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, fn: BackwardFn):
        output._tape = self
        self.records.append(TapeRecord(tuple(inputs), output, fn, op))

    def backward(self, loss: Tensor):
        """Accumulate dLoss/dTensor into every reachable leaf's ``grad``."""
        if loss.data.size != 1:
            raise PreconditionError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self.records):
            upstream = pending.pop(id(record.output), None)
            if upstream is None:
                continue
            input_grads = record.backward(upstream)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += grad
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + grad
                else:
                    pending[id(tensor)] = grad


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss.

    A loss that was never recorded on a tape (detached, or computed outside
    any tape) leaves every gradient untouched.
    """
    if loss.data.size != 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        logger.debug("backward called on a detached tensor, nothing to do")
        return
    loss._tape.backward(loss)


class no_grad:
    """Run ops without recording, even inside an active tape."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False


def named_tensors(params) -> Dict[str, Tensor]:
    """Name -> Tensor view of a parameter container or a plain mapping."""
    if hasattr(params, "tensors"):
        return dict(params.tensors())
    if isinstance(params, Mapping):
        return dict(params)
    raise PreconditionError(f"Cannot enumerate tensors of {type(params)}")
