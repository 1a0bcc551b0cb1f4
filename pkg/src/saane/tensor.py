"""Dense tensors, trainable parameters, and the reverse-mode tape.

Operations in :mod:`saane.ops` record themselves on the tape that is active in
the current context. Nothing is recorded when no tape is active or when none of
an operation's inputs requires a gradient, so inference never pays for it.

.. code-block:: python

    from saane.tensor import Tape

    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
"""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "TapeError",
    "as_tensor",
    "current_tape",
    "record",
]

logger = logging.getLogger(__name__)

#: A function mapping the gradient of an operation's output to the gradients of its inputs
BackwardFunction = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "saane_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when the shapes of operands are incompatible."""


class TapeError(RuntimeError):
    """Raised when a tape is misused."""


@dataclass(eq=False)
class Tensor:
    """An immutable dense array of activations.

    Three-dimensional tensors are feature maps laid out channel-major
    (channel, row, column).
    """

    data: np.ndarray
    requires_grad: bool = False
    parameter: Optional["Parameter"] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        data = np.asarray(self.data).view()
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        data.flags.writeable = False
        self.data = data

    @property
    def shape(self) -> Tuple[int, ...]:
        """Get the extents of the tensor."""
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        """Get the real type of the tensor."""
        return self.data.dtype

    @property
    def ndim(self) -> int:
        """Get the rank of the tensor."""
        return self.data.ndim

    def item(self) -> float:
        """Get the value of a single-element tensor."""
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Get a writable copy of the values."""
        return np.array(self.data)


class Parameter:
    """A named, trainable tensor with an accompanying gradient buffer."""

    def __init__(self, name: str, value: np.ndarray):
        """Initialize the parameter.

        :param name: An identifier, unique within one model (e.g., ``fusion1.proj_a``)
        :param value: The initial values
        """
        self.name = name
        self.value = Tensor(np.array(value), requires_grad=True, parameter=self)
        self.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self) -> Tuple[int, ...]:
        """Get the shape of the parameter."""
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        """Get the real type of the parameter."""
        return self.value.dtype

    def assign(self, value: np.ndarray) -> None:
        """Replace the parameter's values, keeping its shape."""
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to {self.name} of shape {self.shape}")
        self.value = Tensor(np.array(value), requires_grad=True, parameter=self)

    def zero_grad(self) -> None:
        """Reset the gradient buffer."""
        self.grad = np.zeros_like(self.value.data)


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFunction


class Tape:
    """An ordered record of executed operations for a single backward sweep."""

    def __init__(self) -> None:
        """Initialize an empty tape."""
        self.nodes: List[_Node] = []
        self.consumed = False
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *args) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFunction) -> None:
        """Append an executed operation."""
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been swept")
        self.nodes.append(_Node(output=output, inputs=tuple(inputs), backward=backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate the gradient of a scalar loss into every parameter that produced it.

        Nodes are visited in exact reverse order of recording, which is a reverse
        topological order of the forward pass. Gradients are added to
        :attr:`Parameter.grad`, so callers zero them between steps.

        :param loss: A single-element tensor produced by operations on this tape
        :raises TapeError: if the tape was already swept
        :raises ShapeError: if the loss has more than one element
        """
        if self.consumed:
            raise TapeError("backward was already called on this tape; re-run the forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            logger.warning("loss does not depend on any trainable parameter")
            return

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            for tensor, tensor_grad in zip(node.inputs, node.backward(grad)):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor_grad.shape != tensor.shape:
                    raise ShapeError(
                        f"gradient of shape {tensor_grad.shape} for input of shape {tensor.shape}"
                    )
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + tensor_grad
                else:
                    grads[key] = tensor_grad
                if tensor.parameter is not None:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            parameter = tensor.parameter
            if parameter is not None and parameter.value is tensor:
                parameter.grad = parameter.grad + grads[key].astype(parameter.dtype, copy=False)


def current_tape() -> Optional[Tape]:
    """Get the tape active in this context, if any."""
    return _ACTIVE_TAPE.get()


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap an array-like (or pass a tensor through) without tracking gradients."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float32))


def record(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFunction) -> Tensor:
    """Build the output tensor of an operation and record it on the active tape when needed."""
    tape = current_tape()
    tracked = tape is not None and any(tensor.requires_grad for tensor in inputs)
    output = Tensor(data, requires_grad=tracked)
    if tracked:
        tape.record(output, inputs, backward)  # type:ignore
    return output
