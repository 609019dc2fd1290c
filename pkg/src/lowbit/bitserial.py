"""Popcount-based low-bit dot products, GEMM and convolution.

For unsigned codes split into bitplanes W[i] and A[j]::

    W . A = sum_i sum_j popcount(W[i] & A[j]) << (i + j)

Signed weights are stored with an offset ``u = v + z`` (z = Q_N) and the
offset is removed analytically: ``sum v*a = sum u*a - z * sum a``, where
``sum a`` also comes from popcounts of the activation planes.

Two popcount implementations are provided: a portable SWAR bit-trick over
uint64 words and numpy's native ``bitwise_count``. They must agree bit for
bit; ``kernel="auto"`` picks the native one when numpy offers it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bitpack import WORD_BITS, BitplaneTensor, pack_bitplanes
from .errors import ConfigError, ShapeError
from .quant import QuantParams, quantize
from .ref_ops import ConvParams
from .tensor import IntTensor, Layout, Tensor, as_array

# int32 accumulators: 3-bit x 3-bit products (<= 49) over 2^20 elements plus the
# zero-point correction stay far below 2^31.
MAX_K = 1 << 20

DEFAULT_TILE = 8
DEFAULT_L1_BYTES = 32 * 1024

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount_portable(x: np.ndarray) -> np.ndarray:
    """SWAR popcount of each uint64 word, no hardware popcount needed."""
    x = np.asarray(x, dtype=np.uint64)
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return ((x * _H01) >> np.uint64(56)).astype(np.uint8)


def popcount_native(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(x, dtype=np.uint64))


HAS_NATIVE_POPCOUNT = hasattr(np, "bitwise_count")


def _popcount_for(kernel: str):
    if kernel == "auto":
        kernel = "native" if HAS_NATIVE_POPCOUNT else "portable"
    if kernel == "native":
        if not HAS_NATIVE_POPCOUNT:
            raise ConfigError("native popcount needs numpy >= 2.0")
        return popcount_native
    if kernel == "portable":
        return popcount_portable
    raise ConfigError(f"unknown kernel {kernel!r}")


# ---------------------------------------------------------------------------
# Dot products
# ---------------------------------------------------------------------------


def dot_1bit(w_row, a_row, k: int | None = None, kernel: str = "auto") -> int:
    """POPCOUNT(W & A) over packed words."""
    w = np.asarray(w_row, dtype=np.uint64).reshape(-1)
    a = np.asarray(a_row, dtype=np.uint64).reshape(-1)
    if w.shape != a.shape:
        raise ShapeError(f"packed lengths differ: {w.size} vs {a.size} words")
    if k is not None and -(-k // WORD_BITS) != w.size:
        raise ShapeError(f"{w.size} words do not match logical length {k}")
    pc = _popcount_for(kernel)
    return int(pc(w & a).sum(dtype=np.int64))


def _check_pair(w: BitplaneTensor, a: BitplaneTensor):
    if w.k != a.k:
        raise ShapeError(f"logical lengths differ: {w.k} vs {a.k}")
    if w.k > MAX_K:
        raise ShapeError(f"K={w.k} exceeds the accumulator bound {MAX_K}")


def dot_multibit(w: BitplaneTensor, a: BitplaneTensor, w_row: int = 0, a_row: int = 0, kernel: str = "auto") -> int:
    """Dot product of the unsigned codes in ``w[w_row]`` and ``a[a_row]``."""
    _check_pair(w, a)
    pc = _popcount_for(kernel)
    total = 0
    for i in range(w.bits):
        for j in range(a.bits):
            total += int(pc(w.planes[i, w_row] & a.planes[j, a_row]).sum(dtype=np.int64)) << (i + j)
    return total


def code_sum(a: BitplaneTensor, row: int = 0, kernel: str = "auto") -> int:
    """Sum of the unsigned codes of one row, from plane popcounts."""
    pc = _popcount_for(kernel)
    return sum(int(pc(a.planes[j, row]).sum(dtype=np.int64)) << j for j in range(a.bits))


def dot_corrected(w: BitplaneTensor, a: BitplaneTensor, w_row: int = 0, a_row: int = 0, kernel: str = "auto") -> int:
    """Signed-weight dot product: ``dot(u_w, a) - z_w * sum(a)``."""
    if a.zero_point != 0:
        raise ConfigError("activations must be unsigned (zero point 0)")
    raw = dot_multibit(w, a, w_row, a_row, kernel)
    return raw - w.zero_point * code_sum(a, a_row, kernel)


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TilePlan:
    tile_m: int
    tile_n: int
    tile_k: int  # in 64-bit words
    worker_count: int = 1

    def __post_init__(self):
        if min(self.tile_m, self.tile_n, self.tile_k, self.worker_count) < 1:
            raise ConfigError(f"tile sizes and worker count must be positive: {self}")

    def ranges(self, m: int, n: int, k_words: int):
        """Row, column and reduction tile boundaries (edge tiles may be short)."""
        rm = [(i, min(i + self.tile_m, m)) for i in range(0, m, self.tile_m)]
        rn = [(j, min(j + self.tile_n, n)) for j in range(0, n, self.tile_n)]
        rk = [(k, min(k + self.tile_k, k_words)) for k in range(0, k_words, self.tile_k)]
        return rm, rn, rk


def make_tile_plan(
    m: int,
    n: int,
    k_words: int,
    worker_count: int = 1,
    l1_budget_bytes: int = DEFAULT_L1_BYTES,
    tile_m: int = DEFAULT_TILE,
    tile_n: int = DEFAULT_TILE,
) -> TilePlan:
    """Largest reduction tile whose W and A word blocks fit the L1 budget.

    tile_m and tile_n are clamped to the problem first, then
    ``tile_k = budget // (8 * (tile_m + tile_n))`` clamped to ``k_words``.
    """
    if min(m, n, k_words, worker_count) < 1:
        raise ConfigError("dimensions and worker count must be positive")
    if l1_budget_bytes <= 0:
        raise ConfigError("l1 budget must be positive")
    tm = min(tile_m, m)
    tn = min(tile_n, n)
    tk = l1_budget_bytes // (8 * (tm + tn))
    if tk < 1:
        raise ConfigError(f"l1 budget {l1_budget_bytes} B cannot hold one word per tile row")
    return TilePlan(tm, tn, min(tk, k_words), worker_count)


# ---------------------------------------------------------------------------
# GEMM
# ---------------------------------------------------------------------------


def _row_block(wp, ap, out, asum, z, m0, m1, rn, rk, pc):
    bw, ba = wp.shape[0], ap.shape[0]
    for n0, n1 in rn:
        acc = np.zeros((m1 - m0, n1 - n0), dtype=np.int32)
        for k0, k1 in rk:
            for i in range(bw):
                w = wp[i, m0:m1, None, k0:k1]
                for j in range(ba):
                    part = pc(w & ap[j, None, n0:n1, k0:k1]).sum(axis=-1, dtype=np.int32)
                    acc += part << (i + j)
        out[m0:m1, n0:n1] = acc - np.int32(z) * asum[None, n0:n1]


def gemm_bitserial(w: BitplaneTensor, a: BitplaneTensor, plan: TilePlan | None = None, kernel: str = "auto") -> IntTensor:
    """``out[m, n] = dot_corrected(w[m], a[n])`` for all rows, tiled.

    Row tiles are distributed over ``plan.worker_count`` threads; each writes
    a disjoint slice of the output so the result does not depend on the plan.
    """
    _check_pair(w, a)
    if a.zero_point != 0:
        raise ConfigError("activations must be unsigned (zero point 0)")
    pc = _popcount_for(kernel)
    m, n, kw = w.rows, a.rows, w.words
    if plan is None:
        plan = make_tile_plan(m, n, kw)
    rm, rn, rk = plan.ranges(m, n, kw)
    asum = np.zeros(n, dtype=np.int32)
    for j in range(a.bits):
        asum += pc(a.planes[j]).sum(axis=-1, dtype=np.int32) << j
    out = np.empty((m, n), dtype=np.int32)
    args = (w.planes, a.planes, out, asum, w.zero_point)
    if plan.worker_count == 1 or len(rm) == 1:
        for m0, m1 in rm:
            _row_block(*args, m0, m1, rn, rk, pc)
    else:
        with ThreadPoolExecutor(max_workers=plan.worker_count) as pool:
            futures = [pool.submit(_row_block, *args, m0, m1, rn, rk, pc) for m0, m1 in rm]
            for f in futures:
                f.result()
    return IntTensor(out)


# ---------------------------------------------------------------------------
# Convolution lowering
# ---------------------------------------------------------------------------


def im2col(x, p: ConvParams) -> np.ndarray:
    """Lower an NCHW tensor to ``[N*oh*ow, C*kh*kw]`` patch rows.

    Columns follow the (c, ki, kj) order of an OIHW weight reshaped to
    ``[O, C*kh*kw]``. Out-of-image samples are zero.
    """
    arr = as_array(x, dtype=None)
    if arr.ndim != 4:
        raise ShapeError(f"im2col expects NCHW input, got {arr.shape}")
    n, c, h, w = arr.shape
    oh, ow = p.output_hw(h, w)
    (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(arr, (kh, kw), axis=(2, 3))
    win = win[:, :, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _check_codes(codes: np.ndarray, a_quant: QuantParams):
    if a_quant.signed or a_quant.per_channel:
        raise ConfigError("activation codes must be unsigned and per-tensor")
    if codes.size and (codes.min() < 0 or codes.max() > a_quant.q_p):
        raise ConfigError(f"activation codes outside [0, {a_quant.q_p}]")


def _epilogue(acc: np.ndarray, a_quant: QuantParams, w: BitplaneTensor, bias, fuse_relu: bool) -> np.ndarray:
    """int accumulator [M, N] -> float32, scaled by s_a * s_w[m] plus bias."""
    if w.scales is None:
        raise ConfigError("packed weights carry no scales")
    s_w = np.broadcast_to(np.asarray(w.scales, dtype=np.float64).reshape(-1), (w.rows,))
    out = acc.astype(np.float64) * (np.float64(a_quant.scale) * s_w)[:, None]
    if bias is not None:
        b = as_array(bias).reshape(-1)
        if b.size != w.rows:
            raise ShapeError(f"bias has {b.size} entries, expected {w.rows}")
        out += b.astype(np.float64)[:, None]
    out = out.astype(np.float32)
    if fuse_relu:
        np.maximum(out, np.float32(0.0), out=out)
    return out


def conv2d_bitserial(
    a_codes,
    a_quant: QuantParams,
    w_packed: BitplaneTensor,
    bias,
    p: ConvParams,
    fuse_relu: bool = False,
    plan: TilePlan | None = None,
    kernel: str = "auto",
) -> Tensor:
    """Quantized conv: im2col on unsigned activation codes, bitserial GEMM, rescale.

    ``w_packed`` holds OIHW weights flattened to ``[O, C*kh*kw]``, offset by
    their zero point, with per-output-channel ``scales``.
    """
    codes = as_array(a_codes, dtype=np.int32)
    if codes.ndim != 4:
        raise ShapeError(f"conv2d_bitserial expects NCHW codes, got {codes.shape}")
    _check_codes(codes, a_quant)
    n, c, h, w = codes.shape
    kh, kw = p.kernel
    if c * kh * kw != w_packed.k:
        raise ShapeError(f"weights reduce over {w_packed.k}, input patch has {c * kh * kw}")
    oh, ow = p.output_hw(h, w)
    cols = im2col(codes, p)
    a_packed = pack_bitplanes(cols, a_quant.bits)
    if plan is None:
        plan = make_tile_plan(w_packed.rows, a_packed.rows, w_packed.words)
    acc = gemm_bitserial(w_packed, a_packed, plan, kernel).data
    out = _epilogue(acc, a_quant, w_packed, bias, fuse_relu)
    out = out.reshape(w_packed.rows, n, oh, ow).transpose(1, 0, 2, 3)
    return Tensor(np.ascontiguousarray(out), Layout.NCHW)


def dense_bitserial(
    a_codes,
    a_quant: QuantParams,
    w_packed: BitplaneTensor,
    bias,
    fuse_relu: bool = False,
    plan: TilePlan | None = None,
    kernel: str = "auto",
) -> Tensor:
    """Quantized fully connected layer on ``[N, K]`` unsigned codes."""
    codes = as_array(a_codes, dtype=np.int32)
    if codes.ndim != 2 or codes.shape[1] != w_packed.k:
        raise ShapeError(f"dense codes {codes.shape} do not match weight K={w_packed.k}")
    _check_codes(codes, a_quant)
    a_packed = pack_bitplanes(codes, a_quant.bits)
    if plan is None:
        plan = make_tile_plan(w_packed.rows, a_packed.rows, w_packed.words)
    acc = gemm_bitserial(w_packed, a_packed, plan, kernel).data
    out = _epilogue(acc, a_quant, w_packed, bias, fuse_relu)
    return Tensor(np.ascontiguousarray(out.T), Layout.ROW_MAJOR_2D)


def pack_weights(weight, w_quant: QuantParams) -> BitplaneTensor:
    """Quantize FP32 weights (OIHW or [O, K]) and pack them offset-encoded."""
    wa = as_array(weight)
    codes = quantize(wa, w_quant).data.reshape(wa.shape[0], -1)
    scales = np.broadcast_to(np.asarray(w_quant.scale, dtype=np.float32), (wa.shape[0],))
    return pack_bitplanes(codes + w_quant.zero_point, w_quant.bits, w_quant.zero_point, scales)

