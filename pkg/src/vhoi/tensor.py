"""Dense double-precision tensors with reverse-mode differentiation.

The graph is dynamic: every operation returns a fresh :class:`Tensor`
holding references to its parents and a closure that scatters the output
gradient back to them. ``Tensor.backward()`` runs the closures in reverse
topological order. Everything is float64; any non-finite value produced by
an operation is an error, never a silent NaN.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


class Tensor:
    """A node in the computation graph: value, gradient, and backward rule.

    ``needs_grad`` marks tensors that lie on a path from a :class:`Parameter`
    to the loss; backward skips everything else (inputs, masks, labels), so
    constants cost nothing during training.
    """

    __slots__ = ("data", "grad", "parents", "needs_grad", "_backward")

    def __init__(
        self,
        data,
        parents: Iterable["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        needs_grad: bool | None = None,
    ):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward = backward
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in self.parents)
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate gradients of every upstream tensor, seeding d(self)=1.

        Only defined for scalar outputs (losses).
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.needs_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, needs_grad={self.needs_grad})"


class Parameter(Tensor):
    """A named trainable tensor carrying an SGD momentum buffer."""

    __slots__ = ("name", "momentum_buf")

    def __init__(self, name: str, data):
        super().__init__(data, needs_grad=True)
        self.name = name
        self.momentum_buf = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(data) -> Tensor:
    """A leaf tensor that never receives gradients (inputs, masks, labels)."""
    return Tensor(data, needs_grad=False)
