from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .common import ShapeError, TensorIndexError

MAX_RANK = 4


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(dims)}: {list(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"extents must be >= 1: {list(dims)}")
    return dims


def flat_index(shape: Sequence[int], idx: Sequence[int]) -> int:
    """Row-major offset of `idx` inside `shape`."""
    if len(idx) != len(shape):
        raise TensorIndexError(f"index rank {len(idx)} does not match tensor rank {len(shape)}")
    offset = 0
    for axis, (i, extent) in enumerate(zip(idx, shape)):
        i = int(i)
        if not 0 <= i < extent:
            raise TensorIndexError(f"index {i} out of bounds for axis {axis} with extent {extent}")
        offset = offset * extent + i
    return offset


class Tensor:
    """Dense float64 array of rank 1..4, row-major.

    The backing ndarray is owned by the tensor; operations return new
    tensors. `set` is meant for construction only.
    """

    __slots__ = ("_array",)

    def __init__(self, array: np.ndarray) -> None:
        check_shape(array.shape)
        self._array = np.ascontiguousarray(array, dtype=np.float64)

    @classmethod
    def from_flat(cls, shape: Sequence[int], data: Sequence[float]) -> "Tensor":
        dims = check_shape(shape)
        flat = np.array(data, dtype=np.float64).reshape(-1)
        if flat.size != math.prod(dims):
            raise ShapeError(f"{flat.size} values cannot fill shape {list(dims)}")
        return cls(flat.reshape(dims))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return int(self._array.size)

    @property
    def array(self) -> np.ndarray:
        """Backing array; callers must treat it as read-only."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements."""
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._array.copy()

    def get(self, idx: Sequence[int]) -> float:
        return float(self.data[flat_index(self.shape, idx)])

    def set(self, idx: Sequence[int], value: float) -> None:
        self.data[flat_index(self.shape, idx)] = float(value)

    def reshape(self, new_shape: Sequence[int]) -> "Tensor":
        dims = check_shape(new_shape)
        if math.prod(dims) != self.size:
            raise ShapeError(f"cannot reshape {list(self.shape)} ({self.size} elements) into {list(dims)}")
        return Tensor(self._array.reshape(dims).copy())

    def map(self, fn: Callable[[float], float]) -> "Tensor":
        out = np.fromiter((fn(float(v)) for v in self.data), dtype=np.float64, count=self.size)
        return Tensor(out.reshape(self.shape))

    def zip(self, other: "Tensor", fn: Callable[[float, float], float]) -> "Tensor":
        if other.shape != self.shape:
            raise ShapeError(f"zip shape mismatch: {list(self.shape)} vs {list(other.shape)}")
        pairs = zip(self.data, other.data)
        out = np.fromiter((fn(float(a), float(b)) for a, b in pairs), dtype=np.float64, count=self.size)
        return Tensor(out.reshape(self.shape))

    def equals(self, other: "Tensor") -> bool:
        """Bit-exact comparison of shape and data."""
        return self.shape == other.shape and self._array.tobytes() == other._array.tobytes()

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(check_shape(shape), dtype=np.float64))


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape)


def get(t: Tensor, idx: Sequence[int]) -> float:
    return t.get(idx)


def set_value(t: Tensor, idx: Sequence[int], value: float) -> None:
    t.set(idx, value)


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    return t.reshape(new_shape)


def map_tensor(t: Tensor, fn: Callable[[float], float]) -> Tensor:
    return t.map(fn)


def zip_tensors(a: Tensor, b: Tensor, fn: Callable[[float, float], float]) -> Tensor:
    return a.zip(b, fn)
