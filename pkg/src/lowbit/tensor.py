"""Dense FP32 / INT32 tensor containers.

Tensors are thin, read-only wrappers around numpy arrays that carry a layout
tag. Kernels operate on ``.data`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .errors import ShapeError


class Layout(str, Enum):
    NCHW = "NCHW"
    ROW_MAJOR_2D = "RowMajor2D"
    FLAT = "Flat"


_LAYOUT_NDIM = {Layout.NCHW: 4, Layout.ROW_MAJOR_2D: 2}


def default_layout(ndim: int) -> Layout:
    if ndim == 4:
        return Layout.NCHW
    if ndim == 2:
        return Layout.ROW_MAJOR_2D
    return Layout.FLAT


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


class _Base:
    dtype: np.dtype

    def __init__(self, data, layout: Layout | str | None = None):
        arr = np.array(data, dtype=self.dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        layout = default_layout(arr.ndim) if layout is None else Layout(layout)
        want = _LAYOUT_NDIM.get(layout)
        if want is not None and arr.ndim != want:
            raise ShapeError(f"layout {layout.value} needs {want} dims, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.layout = layout

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def reshape(self, shape, layout: Layout | str | None = None):
        shape = _check_shape(shape)
        if int(np.prod(shape)) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}")
        return type(self)(self.data.reshape(shape), layout)

    def numpy(self) -> np.ndarray:
        return self.data

    def __eq__(self, other):
        if not isinstance(other, type(self)):
            return NotImplemented
        return self.layout == other.layout and self.shape == other.shape and bool(
            np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, layout={self.layout.value})"


class Tensor(_Base):
    """32-bit float tensor. 4-D tensors are NCHW."""

    dtype = np.dtype(np.float32)


class IntTensor(_Base):
    """32-bit signed integer tensor (quantized codes, accumulators)."""

    dtype = np.dtype(np.int32)


ArrayLike = Union[Tensor, IntTensor, np.ndarray, Sequence[float]]


def as_array(x, dtype=np.float32) -> np.ndarray:
    if isinstance(x, _Base):
        return x.data
    return np.asarray(x, dtype=dtype)


# fill specs


@dataclass(frozen=True)
class Constant:
    value: float = 0.0


@dataclass(frozen=True)
class Values:
    values: tuple


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float
    seed: int


def tensor_create(shape, layout: Layout | str | None = None, fill=Constant()) -> Tensor:
    """Build a tensor from a fill rule.

    ``fill`` is a :class:`Constant`, a :class:`Uniform` (seeded, reproducible),
    a plain number (constant) or a sequence of values (used in order).
    """
    shape = _check_shape(shape)
    n = int(np.prod(shape))
    if isinstance(fill, (int, float)):
        fill = Constant(float(fill))
    if isinstance(fill, Constant):
        data = np.full(n, fill.value, dtype=np.float32)
    elif isinstance(fill, Uniform):
        rng = np.random.default_rng(fill.seed)
        data = rng.uniform(fill.lo, fill.hi, size=n).astype(np.float32)
    else:
        values = fill.values if isinstance(fill, Values) else fill
        data = np.asarray(values, dtype=np.float32).reshape(-1)
        if data.size != n:
            raise ShapeError(f"sequence fill has {data.size} values, shape needs {n}")
    return Tensor(data.reshape(shape), layout)


def tensor_allclose(a, b, rtol: float = 1e-5, atol: float = 0.0) -> bool:
    """True iff ``|a_i - b_i| <= atol + rtol * |b_i|`` everywhere (asymmetric, like numpy)."""
    x = as_array(a).astype(np.float64)
    y = as_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return bool(np.all(np.abs(x - y) <= atol + rtol * np.abs(y)))
