"""Naive FP32 reference operators.

These are the correctness oracle for every quantized path, so they favour
determinism over speed: convolution accumulates in float64 over the
reduction axes in a fixed (c, ki, kj) order and rounds to float32 once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Layout, Tensor, as_array


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvParams:
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid conv params {self}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw or oh < 1 or ow < 1:
            raise ShapeError(f"kernel {self.kernel} does not fit input {h}x{w} with padding {self.padding}")
        return oh, ow


def _bias(bias, n: int) -> np.ndarray | None:
    if bias is None:
        return None
    b = as_array(bias).reshape(-1)
    if b.size != n:
        raise ShapeError(f"bias has {b.size} entries, expected {n}")
    return b


def conv2d_f32(x, weight, bias, p: ConvParams) -> Tensor:
    """Direct convolution, NCHW input and OIHW weights, zero padding."""
    xa = as_array(x)
    wa = as_array(weight)
    if xa.ndim != 4 or wa.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {xa.shape} and {wa.shape}")
    n, c, h, w = xa.shape
    o, ci, kh, kw = wa.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels, weight expects {ci}")
    if (kh, kw) != p.kernel:
        raise ShapeError(f"weight kernel {(kh, kw)} != params kernel {p.kernel}")
    oh, ow = p.output_hw(h, w)
    (sh, sw), (ph, pw) = p.stride, p.padding
    b = _bias(bias, o)

    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph : ph + h, pw : pw + w] = xa
    w64 = wa.astype(np.float64)
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for ic in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, ic, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]
                out += w64[None, :, ic, i, j, None, None] * patch[:, None, :, :]
    if b is not None:
        out += b.astype(np.float64)[None, :, None, None]
    return Tensor(out.astype(np.float32), Layout.NCHW)


def dense_f32(x, weight, bias=None) -> Tensor:
    """out[n, m] = sum_k x[n, k] * weight[m, k] + bias[m]."""
    xa = as_array(x)
    wa = as_array(weight)
    if xa.ndim != 2 or wa.ndim != 2:
        raise ShapeError(f"dense expects 2-D operands, got {xa.shape} and {wa.shape}")
    if xa.shape[1] != wa.shape[1]:
        raise ShapeError(f"inner extents differ: {xa.shape[1]} vs {wa.shape[1]}")
    b = _bias(bias, wa.shape[0])
    x64 = xa.astype(np.float64)
    w64 = wa.astype(np.float64)
    out = np.zeros((xa.shape[0], wa.shape[0]), dtype=np.float64)
    for k in range(xa.shape[1]):
        out += x64[:, k, None] * w64[None, :, k]
    if b is not None:
        out += b.astype(np.float64)[None, :]
    return Tensor(out.astype(np.float32), Layout.ROW_MAJOR_2D)


def relu(t) -> Tensor:
    a = as_array(t)
    layout = t.layout if isinstance(t, Tensor) else None
    return Tensor(np.maximum(a, np.float32(0.0)), layout)


def maxpool2d(t, window, stride=None) -> Tensor:
    """Windowed max over H and W, no padding. ``stride`` defaults to ``window``."""
    a = as_array(t)
    if a.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {a.shape}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError("window and stride must be >= 1")
    n, c, h, w = a.shape
    if kh > h or kw > w:
        raise ShapeError(f"window {(kh, kw)} larger than input {(h, w)}")
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.full((n, c, oh, ow), -np.inf, dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            np.maximum(out, a[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw], out=out)
    return Tensor(out, Layout.NCHW)


def add(a, b) -> Tensor:
    x, y = as_array(a), as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"add operands differ in shape: {x.shape} vs {y.shape}")
    layout = a.layout if isinstance(a, Tensor) else None
    return Tensor(x + y, layout)
