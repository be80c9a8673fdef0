"""Dense matrix and order-3 tensor values with the contractions the model needs.

Values are immutable: every operation returns a new value backed by a read-only float64 array.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import errors


__all__ = (
    "Matrix",
    "Tensor3",
    "contract_two",
    "frobenius_norm_sq",
    "matmul",
    "mode_n_product",
)


def _frozen(data, shape: tuple[int, ...]) -> np.ndarray:
    ret = np.array(data, dtype=np.float64, copy=True).reshape(shape)
    if not np.all(np.isfinite(ret)):
        raise errors.NonFiniteValue(f"Refusing to build a value of shape {shape} holding NaN or Inf.")
    ret.setflags(write=False)
    return ret


class Matrix:
    __slots__ = ("_array",)

    def __init__(self, rows: int, cols: int, data: Iterable[float] | np.ndarray):
        flat = np.asarray(data, dtype=np.float64).ravel()
        if flat.size != rows * cols:
            raise errors.ShapeMismatch("Matrix", (rows, cols), (flat.size,))
        self._array = _frozen(flat, (rows, cols))

    @classmethod
    def from_array(cls, array: np.ndarray) -> Matrix:
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2:
            raise errors.ShapeMismatch("Matrix.from_array", array.shape, (0, 0))
        return cls(array.shape[0], array.shape[1], array)

    @classmethod
    def identity(cls, size: int) -> Matrix:
        return cls.from_array(np.eye(size))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> Matrix:
        return cls.from_array(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self._array.shape[0]

    @property
    def cols(self) -> int:
        return self._array.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def data(self) -> tuple[float, ...]:
        """Entries in row-major order."""
        return tuple(self._array.ravel().tolist())

    @property
    def array(self) -> np.ndarray:
        """Read-only (rows, cols) view."""
        return self._array

    def get(self, row: int, col: int) -> float:
        return float(self._array[row, col])

    def with_entry(self, index: tuple[int, int], value: float) -> Matrix:
        ret = self._array.copy()
        ret[index] = value
        return Matrix.from_array(ret)

    def transpose(self) -> Matrix:
        return Matrix.from_array(self._array.T)

    def __add__(self, other: Matrix) -> Matrix:
        if self.shape != other.shape:
            raise errors.ShapeMismatch("add", self.shape, other.shape)
        return Matrix.from_array(self._array + other._array)

    def __sub__(self, other: Matrix) -> Matrix:
        if self.shape != other.shape:
            raise errors.ShapeMismatch("subtract", self.shape, other.shape)
        return Matrix.from_array(self._array - other._array)

    def __mul__(self, scalar: float) -> Matrix:
        return Matrix.from_array(self._array * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Matrix) and self.shape == other.shape and bool(
            np.array_equal(self._array, other._array)
        )

    def __repr__(self) -> str:
        return f"<Matrix {self.rows}x{self.cols}>"


class Tensor3:
    __slots__ = ("_array",)

    def __init__(self, dims: tuple[int, int, int], data: Iterable[float] | np.ndarray):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3:
            raise errors.ShapeMismatch("Tensor3", dims, (0, 0, 0))
        flat = np.asarray(data, dtype=np.float64).ravel()
        if flat.size != dims[0] * dims[1] * dims[2]:
            raise errors.ShapeMismatch("Tensor3", dims, (flat.size,))
        self._array = _frozen(flat, dims)

    @classmethod
    def from_array(cls, array: np.ndarray) -> Tensor3:
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 3:
            raise errors.ShapeMismatch("Tensor3.from_array", array.shape, (0, 0, 0))
        return cls(array.shape, array)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._array.shape

    @property
    def data(self) -> tuple[float, ...]:
        """Entries in row-major order, last index fastest."""
        return tuple(self._array.ravel().tolist())

    @property
    def array(self) -> np.ndarray:
        return self._array

    def get(self, i: int, j: int, k: int) -> float:
        return float(self._array[i, j, k])

    def with_entry(self, index: tuple[int, int, int], value: float) -> Tensor3:
        ret = self._array.copy()
        ret[index] = value
        return Tensor3.from_array(ret)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Tensor3) and self.dims == other.dims and bool(
            np.array_equal(self._array, other._array)
        )

    def __repr__(self) -> str:
        return f"<Tensor3 {'x'.join(str(d) for d in self.dims)}>"


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"Mode must be one of 1, 2, 3, got {mode}.")
    return mode - 1


def mode_n_product(t: Tensor3, m: Matrix, n: int) -> Tensor3:
    """Multiply ``t`` along mode ``n`` (1-based) by ``m``: the mode's size becomes ``m.rows``."""
    axis = _check_mode(n)
    if m.cols != t.dims[axis]:
        raise errors.ShapeMismatch(f"mode-{n} product", t.dims, m.shape)

    # tensordot puts the new axis last, move it back into place.
    ret = np.tensordot(t.array, m.array, axes=([axis], [1]))
    return Tensor3.from_array(np.moveaxis(ret, -1, axis))


def contract_two(t: Tensor3, u: Tensor3, t_modes: tuple[int, int], u_modes: tuple[int, int]) -> Matrix:
    """Contract two order-3 tensors over two mode pairs, leaving the free mode of each.

    The result is indexed (free mode of ``t``, free mode of ``u``).
    """
    t_axes = [_check_mode(mode) for mode in t_modes]
    u_axes = [_check_mode(mode) for mode in u_modes]
    if len(set(t_axes)) != 2 or len(set(u_axes)) != 2:
        raise ValueError(f"Contracted modes must be two distinct modes, got {t_modes} and {u_modes}.")

    for t_axis, u_axis in zip(t_axes, u_axes):
        if t.dims[t_axis] != u.dims[u_axis]:
            raise errors.ShapeMismatch(f"contraction {t_modes}/{u_modes}", t.dims, u.dims)

    return Matrix.from_array(np.tensordot(t.array, u.array, axes=(t_axes, u_axes)))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise errors.ShapeMismatch("matmul", a.shape, b.shape)
    return Matrix.from_array(a.array @ b.array)


def frobenius_norm_sq(m: Matrix) -> float:
    return float(np.sum(m.array * m.array))
