"""Dense tensors, trainable parameters, and the reverse-mode tape.

The engine is define-by-run: while a Tape is active, every differentiable
op appends one backward closure to it. Execution order is a topological
order by construction, so Tape.backward simply walks the closures in
reverse, accumulating gradients additively into Tensor.grad buffers.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

# Stack of active tapes; ops record onto the innermost one.
_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense n-dimensional float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named leaf tensor updated by the optimizer; always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, data: ArrayLike, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.data.shape})"


class Tape:
    """Ordered record of executed ops; replayed backwards for gradients.

    Usable as a context manager:

        with Tape() as tape:
            loss = total_loss(model.forward(x, training=True, rng=rng), y, cfg)
        tape.backward(loss)
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[], None]]] = []

    def record(self, out: Tensor, backward_fn: Callable[[], None]) -> None:
        self._nodes.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def backward(self, output: Tensor) -> None:
        """Seed d(output)/d(output) = 1 and propagate in reverse order."""
        if output.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar output, got shape {output.data.shape}")
        output.accumulate_grad(np.ones_like(output.data))
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
