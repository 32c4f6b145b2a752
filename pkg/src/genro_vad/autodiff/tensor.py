# Copyright (c) 2025 Softwell Srl, Milano, Italy
# SPDX-License-Identifier: Apache-2.0
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Reverse-mode differentiable tensors.

A :class:`Tensor` wraps a dense row-major numpy array. Every operation on
tensors that require gradients records its inputs and a backward closure;
:meth:`Tensor.backward` traces those records into a :class:`Graph` and walks
it in exact reverse topological order. The graph is rebuilt by every forward
pass and never reused.

Precision is global: ``float32`` by default, ``float64`` for gradient checks
and other oracle runs.

Examples:
    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> loss = (w * w).sum()
    >>> loss.backward()
    >>> w.grad
    array([2., 4., 6.], dtype=float32)
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence, Union

import numpy as np

from ..exceptions import DimensionError, GraphError, NumericDivergenceError, VadConfigError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}

BackwardFn = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]


def set_precision(name: str) -> None:
    """Select the global floating point precision (``float32`` or ``float64``)."""
    if name not in _PRECISIONS:
        raise VadConfigError(
            f"Unknown precision '{name}'. Valid values: {', '.join(_PRECISIONS)}"
        )
    _state["dtype"] = _PRECISIONS[name]


def get_dtype() -> type:
    """Return the numpy dtype currently used for new tensors."""
    return _state["dtype"]


def get_precision() -> str:
    """Return the name of the current precision."""
    return "float64" if _state["dtype"] is np.float64 else "float32"


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global precision.

    Examples:
        >>> with precision('float64'):
        ...     t = Tensor([1.0])
        >>> t.dtype
        dtype('float64')
    """
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, frozen models)."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return bool(_state["grad_enabled"])


def check_finite(data: np.ndarray, op: str) -> None:
    """Raise NumericDivergenceError if ``data`` contains NaN or Inf."""
    if not np.all(np.isfinite(data)):
        raise NumericDivergenceError(f"Non-finite values produced by '{op}'")


def normalize_axis(axis: int, ndim: int) -> int:
    """Map a possibly negative axis into ``range(ndim)``."""
    if not -ndim <= axis < ndim:
        raise DimensionError(f"Axis {axis} out of range for tensor of rank {ndim}")
    return axis % ndim


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """Dense array with optional gradient tracking.

    Args:
        data: Array-like values, copied and cast to the current precision
        requires_grad: Mark the tensor as a leaf whose gradient is wanted

    Attributes:
        data: The underlying numpy array
        grad: Accumulated gradient (same shape as ``data``) or None
        requires_grad: Whether gradients flow to or through this tensor
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False):
        array = np.array(data, dtype=get_dtype())
        check_finite(array, "tensor")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        op: str,
        backward: BackwardFn,
    ) -> Tensor:
        """Build the result of an operation, recording it when gradients are needed."""
        data = np.asarray(data, dtype=get_dtype())
        check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        requires = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = requires
        if requires:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ properties

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        """Return the value of a single-element tensor as a Python float."""
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------ arithmetic

    def __add__(self, other: Any) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        _check_broadcast(a_shape, b_shape, "add")
        return Tensor.from_op(
            self.data + other.data,
            (self, other),
            "add",
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor.from_op(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other: Any) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other: Any) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other: Any) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        _check_broadcast(a.shape, b.shape, "mul")
        return Tensor.from_op(
            a * b,
            (self, other),
            "mul",
            lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        _check_broadcast(a.shape, b.shape, "div")
        return Tensor.from_op(
            a / b,
            (self, other),
            "div",
            lambda g: (unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other: Any) -> Tensor:
        return as_tensor(other) / self

    def __matmul__(self, other: Tensor) -> Tensor:
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
        return Tensor.from_op(
            a @ b, (self, other), "matmul", lambda g: (g @ b.T, a.T @ g)
        )

    # ------------------------------------------------------------------ reductions / shape

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return Tensor.from_op(self.data.sum(axis=axes, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            data = self.data.reshape(shape).copy()
        except ValueError as e:
            raise DimensionError(f"Cannot reshape {original} to {shape}: {e}") from e
        return Tensor.from_op(data, (self,), "reshape", lambda g: (g.reshape(original),))

    def transpose(self, *axes: int) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if sorted(axes) != list(range(self.ndim)):
            raise DimensionError(f"Invalid permutation {axes} for rank {self.ndim}")
        inverse = tuple(np.argsort(axes))
        data = np.ascontiguousarray(self.data.transpose(axes))
        return Tensor.from_op(data, (self,), "transpose", lambda g: (g.transpose(inverse),))

    # ------------------------------------------------------------------ autodiff

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every requires_grad leaf.

        Raises:
            GraphError: If self is not a scalar or is not connected to any leaf
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() on a detached graph: loss does not require grad")

        graph = Graph.trace(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        if self.is_leaf:
            _accumulate(self, pending.pop(id(self)))
            return

        for record in reversed(graph.records):
            grad_out = pending.pop(id(record.output), None)
            if grad_out is None:
                continue
            input_grads = record.backward(grad_out)
            for parent, grad in zip(record.inputs, input_grads):
                if grad is None or not parent.requires_grad:
                    continue
                check_finite(grad, f"backward of {record.op}")
                if parent.is_leaf:
                    _accumulate(parent, grad)
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + grad
                else:
                    pending[id(parent)] = grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass(frozen=True)
class OpRecord:
    """One recorded operation of a graph."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass(frozen=True)
class Graph:
    """Topologically ordered op records reachable from an output tensor.

    Records appear after all records producing their inputs, so iterating
    ``reversed(records)`` visits every op after all of its consumers.
    """

    records: tuple[OpRecord, ...]

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order: list[OpRecord] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(OpRecord(node._op, node._parents, node, node._backward))
                continue
            if id(node) in visited or node.is_leaf:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and not parent.is_leaf:
                    stack.append((parent, False))
        return cls(tuple(order))

    def __len__(self) -> int:
        return len(self.records)


def as_tensor(value: Any) -> Tensor:
    """Wrap numbers and arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _accumulate(leaf: Tensor, grad: np.ndarray) -> None:
    grad = unbroadcast(np.asarray(grad), leaf.shape)
    if leaf.grad is None:
        leaf.grad = np.array(grad, dtype=leaf.dtype)
    else:
        leaf.grad = leaf.grad + grad


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError as e:
        raise DimensionError(f"Incompatible shapes for {op}: {a} and {b}") from e


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(normalize_axis(a, ndim) for a in axis))
