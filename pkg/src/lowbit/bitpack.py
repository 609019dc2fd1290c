"""Bitplane packing of unsigned low-bit codes.

Layout: element ``k`` of a row goes to word ``k // 64``, bit ``k % 64``
(bit 0 is the least significant). Plane ``i`` holds bit ``i`` of every code.
Planes are stored plane-major as an array of shape ``(bits, rows, words)``
and serialize as little-endian 64-bit words in that order. Columns past the
logical length ``K`` are always zero.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import IntTensor, as_array

WORD_BITS = 64


def words_for(k: int) -> int:
    return -(-int(k) // WORD_BITS)


class BitplaneTensor:
    """Packed ``rows x K`` matrix of unsigned ``bits``-bit codes.

    ``zero_point`` records the offset that was added to signed codes before
    packing (0 for unsigned data) and ``scales`` the per-row or scalar
    quantization scale, so a packed weight is self-describing.
    """

    def __init__(self, planes: np.ndarray, k: int, zero_point: int = 0, scales=None):
        planes = np.ascontiguousarray(planes, dtype=np.uint64)
        if planes.ndim != 3:
            raise ShapeError(f"planes must be (bits, rows, words), got {planes.shape}")
        bits, rows, words = planes.shape
        if not 1 <= bits <= 8:
            raise ConfigError(f"unsupported bit width {bits}")
        if k < 1 or words != words_for(k):
            raise ShapeError(f"{words} words cannot hold logical length {k}")
        if k % WORD_BITS:
            tail = planes[:, :, -1] >> np.uint64(k % WORD_BITS)
            if np.any(tail):
                raise DataError("padding bits beyond the logical length must be zero")
        planes.setflags(write=False)
        self.planes = planes
        self.k = int(k)
        self.zero_point = int(zero_point)
        if scales is not None:
            scales = np.asarray(scales, dtype=np.float32)
            scales.setflags(write=False)
        self.scales = scales

    @property
    def bits(self) -> int:
        return self.planes.shape[0]

    @property
    def rows(self) -> int:
        return self.planes.shape[1]

    @property
    def words(self) -> int:
        return self.planes.shape[2]

    @property
    def padded_cols(self) -> int:
        return self.words * WORD_BITS

    @property
    def nbytes(self) -> int:
        return self.planes.nbytes

    def to_bytes(self) -> bytes:
        return self.planes.astype("<u8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, bits: int, rows: int, k: int, zero_point: int = 0, scales=None):
        words = words_for(k)
        need = bits * rows * words * 8
        if len(buf) != need:
            raise ShapeError(f"expected {need} bytes of planes, got {len(buf)}")
        planes = np.frombuffer(buf, dtype="<u8").astype(np.uint64).reshape(bits, rows, words)
        return cls(planes, k, zero_point, scales)

    def row(self, r: int) -> "BitplaneTensor":
        s = self.scales
        if s is not None and s.ndim == 1:
            s = s[r : r + 1]
        return BitplaneTensor(self.planes[:, r : r + 1, :], self.k, self.zero_point, s)

    def __eq__(self, other):
        if not isinstance(other, BitplaneTensor):
            return NotImplemented
        same_scales = (self.scales is None and other.scales is None) or (
            self.scales is not None and other.scales is not None and np.array_equal(self.scales, other.scales)
        )
        return self.k == other.k and self.zero_point == other.zero_point and same_scales and bool(
            np.array_equal(self.planes, other.planes)
        )

    def __repr__(self):
        return f"BitplaneTensor(bits={self.bits}, rows={self.rows}, k={self.k}, zero_point={self.zero_point})"


def pack_bitplanes(codes, bits: int, zero_point: int = 0, scales=None) -> BitplaneTensor:
    """Pack a ``[rows, K]`` matrix of codes in ``[0, 2^bits)`` (1-D input is one row)."""
    c = as_array(codes, dtype=np.int64)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2 or c.shape[1] < 1:
        raise ShapeError(f"pack_bitplanes expects [rows, K], got {c.shape}")
    if c.size and (c.min() < 0 or c.max() >= 1 << bits):
        raise DataError(f"codes must lie in [0, {1 << bits}) for {bits}-bit packing")
    rows, k = c.shape
    words = words_for(k)
    padded = np.zeros((rows, words * WORD_BITS), dtype=np.uint8)
    planes = np.empty((bits, rows, words), dtype=np.uint64)
    for i in range(bits):
        padded[:, :k] = (c >> i) & 1
        packed = np.packbits(padded, axis=1, bitorder="little")
        planes[i] = packed.view("<u8").astype(np.uint64, copy=False)
    return BitplaneTensor(planes, k, zero_point, scales)


def unpack_bitplanes(p: BitplaneTensor) -> IntTensor:
    """Inverse of :func:`pack_bitplanes`: the ``[rows, K]`` unsigned codes."""
    out = np.zeros((p.rows, p.k), dtype=np.int32)
    for i in range(p.bits):
        raw = p.planes[i].astype("<u8", copy=False).view(np.uint8)
        bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : p.k]
        out |= bits.astype(np.int32) << i
    return IntTensor(out)
