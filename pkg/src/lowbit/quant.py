"""Uniform low-bit quantization: codes = round(clip(t / s, -Q_N, Q_P)).

Signed tensors (weights) use Q_P = 2^(b-1) - 1, Q_N = 2^(b-1); unsigned
tensors (post-relu activations) use Q_P = 2^b - 1, Q_N = 0. Rounding is
half-to-even. Scales are always float32-representable so that they survive
the container round trip unchanged.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import IntTensor, Tensor, as_array

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-output-channel"

MIN_BITS, MAX_BITS = 1, 3

# Grid search settings for fit_scale.
GRID_SIZE = 256
# Candidates are rounded to this many significand bits. With |code| <= 7 the
# product code * s is then exact in float32, which keeps the bitserial path and
# the fake-quantized reference bit-identical.
SCALE_MANTISSA_BITS = 16


class DegenerateScaleWarning(UserWarning):
    """fit_scale was handed an all-zero tensor (or channel) and fell back to s=1."""


def clip_limits(bits: int, signed: bool) -> tuple[int, int]:
    """Return ``(Q_N, Q_P)``. Codes live in ``[-Q_N, Q_P]``."""
    if signed:
        return 2 ** (bits - 1), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


class QuantParams:
    """Scale, bit width and signedness of one quantized tensor.

    ``scale`` is a scalar for per-tensor quantization or a 1-D array with one
    entry per output channel (axis 0).
    """

    __slots__ = ("bits", "signed", "scale", "granularity")

    def __init__(self, bits: int, scale, signed: bool = True, granularity: str | None = None):
        bits = int(bits)
        if not MIN_BITS <= bits <= MAX_BITS:
            raise ConfigError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
        s = np.asarray(scale, dtype=np.float32)
        if granularity is None:
            granularity = PER_TENSOR if s.ndim == 0 else PER_CHANNEL
        if granularity == PER_TENSOR:
            if s.size != 1:
                raise ConfigError("per-tensor quantization needs a scalar scale")
            s = float(s.reshape(()))
            ok = np.isfinite(s) and s > 0
        elif granularity == PER_CHANNEL:
            s = s.reshape(-1).copy()
            s.setflags(write=False)
            ok = s.size > 0 and bool(np.all(np.isfinite(s)) and np.all(s > 0))
        else:
            raise ConfigError(f"unknown granularity {granularity!r}")
        if not ok:
            raise ConfigError(f"scale must be positive and finite, got {scale!r}")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "signed", bool(signed))
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "granularity", granularity)

    def __setattr__(self, name, value):
        raise AttributeError("QuantParams is immutable")

    @property
    def q_n(self) -> int:
        return clip_limits(self.bits, self.signed)[0]

    @property
    def q_p(self) -> int:
        return clip_limits(self.bits, self.signed)[1]

    @property
    def zero_point(self) -> int:
        return self.q_n

    @property
    def per_channel(self) -> bool:
        return self.granularity == PER_CHANNEL

    def scale_array(self, ndim: int) -> np.ndarray:
        """Scale as float64, broadcastable against an ``ndim``-D tensor (channel on axis 0)."""
        s = np.asarray(self.scale, dtype=np.float64)
        if self.per_channel:
            return s.reshape((-1,) + (1,) * (ndim - 1))
        return s

    def to_dict(self) -> dict:
        d = {"bits": self.bits, "signed": self.signed, "granularity": self.granularity}
        if not self.per_channel:
            d["scale"] = self.scale
        return d

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.signed == other.signed
            and self.granularity == other.granularity
            and bool(np.array_equal(self.scale, other.scale))
        )

    def __repr__(self):
        s = self.scale if not self.per_channel else f"[{len(self.scale)} channels]"
        return f"QuantParams(bits={self.bits}, signed={self.signed}, scale={s})"


def _check_channels(a: np.ndarray, q: QuantParams):
    if q.per_channel and (a.ndim == 0 or a.shape[0] != len(q.scale)):
        raise ShapeError(f"per-channel scale has {len(q.scale)} entries, tensor shape {a.shape}")


def quantize(t, q: QuantParams) -> IntTensor:
    a = as_array(t)
    if not np.all(np.isfinite(a)):
        raise DataError("cannot quantize non-finite values")
    _check_channels(a, q)
    scaled = a.astype(np.float64) / q.scale_array(a.ndim)
    codes = np.rint(np.clip(scaled, -q.q_n, q.q_p))
    return IntTensor(codes.astype(np.int32))


def dequantize(codes, q: QuantParams) -> Tensor:
    c = as_array(codes, dtype=np.int32)
    _check_channels(c, q)
    if c.size and (c.min() < -q.q_n or c.max() > q.q_p):
        raise DataError(f"codes outside [{-q.q_n}, {q.q_p}]")
    return Tensor((c * q.scale_array(c.ndim)).astype(np.float32))


def fake_quantize(t, q: QuantParams | None = None, *, bits: int | None = None, signed: bool = True) -> Tensor:
    """dequantize(quantize(t)). Without ``q`` the scale is fitted first."""
    if q is None:
        if bits is None:
            raise ConfigError("fake_quantize needs QuantParams or a bit width")
        q = fit_scale(t, bits, signed)
    return dequantize(quantize(t, q), q)


def quant_error(t, q: QuantParams) -> float:
    """Mean squared reconstruction error of ``t`` under ``q``."""
    a = as_array(t)
    if a.size == 0:
        raise ShapeError("quant_error of an empty tensor")
    recon = fake_quantize(a, q).data.astype(np.float64)
    return float(np.mean((a.astype(np.float64) - recon) ** 2))


def _round_significand(x: np.ndarray, nbits: int) -> np.ndarray:
    m, e = np.frexp(x)
    return np.ldexp(np.round(m * 2.0**nbits) / 2.0**nbits, e)


def _naive_divisor(bits: int, signed: bool) -> int:
    q_n, q_p = clip_limits(bits, signed)
    # 1-bit signed has Q_P = 0; fall back to the negative limit.
    return q_p if q_p > 0 else q_n


def naive_scale(t, bits: int, signed: bool) -> float:
    """max|t| / Q_P, the baseline that fit_scale must never lose to."""
    amax = float(np.max(np.abs(as_array(t))))
    return float(np.float32(amax / _naive_divisor(bits, signed)))


def scale_candidates(amax: float, bits: int, signed: bool) -> np.ndarray:
    """Sorted, de-duplicated float32 candidate scales for a tensor with max-abs ``amax``."""
    q_n, _ = clip_limits(bits, signed)
    div = _naive_divisor(bits, signed)
    lo = amax / (div * 8)
    hi = amax * 2 / max(q_n, 1)
    grid = _round_significand(np.geomspace(lo, hi, GRID_SIZE), SCALE_MANTISSA_BITS)
    grid = np.append(grid, np.float32(amax / div)).astype(np.float32)
    grid = grid[grid > 0]
    return np.unique(grid)


def _fit_1d(a: np.ndarray, bits: int, signed: bool) -> float:
    a64 = a.astype(np.float64).reshape(-1)
    amax = float(np.max(np.abs(a64)))
    if amax == 0.0:
        warnings.warn("all-zero tensor, using scale 1.0", DegenerateScaleWarning, stacklevel=3)
        return 1.0
    q_n, q_p = clip_limits(bits, signed)
    cands = scale_candidates(amax, bits, signed).astype(np.float64)
    # One vectorized pass over all candidates; mirrors quant_error exactly,
    # including the float32 rounding of the reconstruction.
    err = np.empty(len(cands))
    step = max(1, (1 << 21) // a64.size)
    for i in range(0, len(cands), step):
        c = cands[i : i + step, None]
        codes = np.rint(np.clip(a64[None, :] / c, -q_n, q_p))
        recon = (codes * c).astype(np.float32).astype(np.float64)
        err[i : i + step] = np.mean((a64[None, :] - recon) ** 2, axis=1)
    # argmin picks the first minimum, i.e. the smallest scale on ties
    return float(cands[int(np.argmin(err))])


def fit_scale(t, bits: int, signed: bool, per_channel: bool = False) -> QuantParams:
    """Pick the scale minimizing mean squared quantization error.

    Searches a geometric grid of candidates between max|t|/(8 Q_P) and
    2 max|t|/Q_N (plus the naive max|t|/Q_P), so the result is never worse
    than the naive scale. An all-zero tensor yields s=1 and a
    :class:`DegenerateScaleWarning`.
    """
    if not MIN_BITS <= int(bits) <= MAX_BITS:
        raise ConfigError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    a = as_array(t)
    if a.size == 0:
        raise ShapeError("fit_scale of an empty tensor")
    if not np.all(np.isfinite(a)):
        raise DataError("cannot fit a scale to non-finite values")
    if per_channel:
        rows = a.reshape(a.shape[0], -1)
        scales = np.array([_fit_1d(r, bits, signed) for r in rows], dtype=np.float32)
        return QuantParams(bits, scales, signed, PER_CHANNEL)
    return QuantParams(bits, _fit_1d(a, bits, signed), signed, PER_TENSOR)
