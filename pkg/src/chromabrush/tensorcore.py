"""Dense float64 tensors and the bulk numeric kernels everything else builds on.

A :class:`Tensor` is a fixed-shape, row-major array of 64-bit floats that is
immutable from the caller's perspective. There is deliberately no
broadcasting: every shape mismatch is an error, because nothing in the
optimization mathematics needs broadcast semantics and implicit broadcast
hides transposition bugs.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidShapeError, NonFiniteError, ShapeError

__all__ = ["Tensor", "tensor_new", "matmul", "axpy", "sum_squares"]


def _validated_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise InvalidShapeError("tensor rank must be at least 1")
    for extent in shape:
        if extent < 1:
            raise InvalidShapeError(f"extents must be >= 1, got {shape}")
    return shape


class Tensor:
    """Immutable dense tensor of float64 scalars, row-major, outermost first."""

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64, order="C")
        if shape is not None:
            wanted = _validated_shape(shape)
            if arr.size != int(np.prod(wanted)):
                raise InvalidShapeError(
                    f"{arr.size} values cannot fill shape {wanted}"
                )
            arr = arr.reshape(wanted)
        else:
            _validated_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite")
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a float64 array without copying. Internal use only."""
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite")
        arr.flags.writeable = False
        t._array = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values (read-only)."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """The values as a read-only ndarray of the tensor's shape."""
        return self._array

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        wanted = _validated_shape(shape)
        if int(np.prod(wanted)) != self.size:
            raise InvalidShapeError(f"cannot reshape {self.shape} to {wanted}")
        return Tensor._wrap(self._array.reshape(wanted))

    def tolist(self):
        return self._array.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> Tensor:
    """Create a tensor of the given shape with every element equal to ``fill``."""
    wanted = _validated_shape(shape)
    return Tensor._wrap(np.full(wanted, float(fill), dtype=np.float64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors: C[i,j] = sum_t A[i,t] * B[t,j]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    return Tensor._wrap(a.array @ b.array)


def axpy(alpha: float, x: Tensor, y: Tensor) -> Tensor:
    """Element-wise ``alpha * x + y`` over tensors of identical shape."""
    if x.shape != y.shape:
        raise ShapeError(f"axpy shapes disagree: {x.shape} vs {y.shape}")
    return Tensor._wrap(float(alpha) * x.array + y.array)


def sum_squares(x: Tensor) -> float:
    """Sum of squared elements; nonnegative."""
    flat = x.data
    return float(np.dot(flat, flat))
