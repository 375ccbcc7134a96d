"""Fixed-point arithmetic over the integer ring Z_{2^l}.

Ring matrices are plain ``numpy.uint64`` arrays whose entries are already
reduced modulo ``2**ring_bits``.  Negative reals are stored in two's
complement, so the signed value of an entry ``e`` is ``e - 2**l`` whenever
``e >= 2**(l-1)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FixedPointConfig",
    "FixedPointOverflow",
    "DimensionMismatch",
    "encode_fixed",
    "decode_fixed",
    "truncate",
    "to_signed",
    "reduce",
    "ring_add",
    "ring_sub",
    "ring_neg",
    "ring_scale",
    "ring_matmul",
    "pack_matrix",
    "unpack_matrix",
    "matrix_nbytes",
]


class FixedPointOverflow(ValueError):
    """A real value does not fit in the configured fixed-point range."""


class DimensionMismatch(ValueError):
    """Operand shapes are incompatible."""


@dataclass(frozen=True)
class FixedPointConfig:
    """Ring width and number of fractional bits of the fixed-point encoding."""

    ring_bits: int = 64
    frac_bits: int = 20

    def __post_init__(self):
        if self.ring_bits not in (32, 64):
            raise ValueError(f"ring_bits must be 32 or 64, got {self.ring_bits}")
        if not 0 < self.frac_bits < self.ring_bits / 2:
            raise ValueError(
                f"frac_bits must satisfy 0 < frac_bits < {self.ring_bits // 2}, "
                f"got {self.frac_bits}"
            )

    @property
    def modulus(self) -> int:
        return 1 << self.ring_bits

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def limit(self) -> float:
        """Exclusive bound on ``|x|`` for encodable reals."""
        return float(2 ** (self.ring_bits - self.frac_bits - 1))

    @property
    def word_bytes(self) -> int:
        return self.ring_bits // 8


def _mask(bits: int) -> np.uint64:
    return np.uint64((1 << bits) - 1)


def reduce(a, bits: int = 64) -> np.ndarray:
    """Reduce a uint64 array modulo ``2**bits``."""
    a = np.asarray(a, dtype=np.uint64)
    if bits == 64:
        return a
    return a & _mask(bits)


def ring_add(a, b, bits: int = 64):
    return reduce(np.add(a, b, dtype=np.uint64), bits)


def ring_sub(a, b, bits: int = 64):
    return reduce(np.subtract(a, b, dtype=np.uint64), bits)


def ring_neg(a, bits: int = 64):
    return reduce(np.negative(np.asarray(a, dtype=np.uint64)), bits)


def ring_scale(a, k: int, bits: int = 64):
    """Multiply by a small public integer ``k`` (may be negative)."""
    return reduce(np.multiply(a, np.uint64(k % (1 << 64)), dtype=np.uint64), bits)


def ring_matmul(a, b, bits: int = 64) -> np.ndarray:
    """Matrix product with every addition and multiplication wrapping mod 2^bits.

    numpy's integer matmul uses C unsigned arithmetic, which already wraps
    modulo 2^64; a 32-bit ring is obtained by masking afterwards since
    2^32 divides 2^64.
    """
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return reduce(np.matmul(a, b), bits)


def to_signed(e, bits: int = 64) -> np.ndarray:
    """Two's-complement signed view of ring elements as int64."""
    e = np.asarray(e, dtype=np.uint64)
    if bits == 64:
        return e.view(np.int64)
    s = e.astype(np.int64)
    return np.where(s >= (1 << (bits - 1)), s - (1 << bits), s)


def _from_signed(s, bits: int) -> np.ndarray:
    return reduce(np.asarray(s, dtype=np.int64).astype(np.uint64), bits)


def _round_half_away(a: np.ndarray) -> np.ndarray:
    # floor(|a| + 0.5) is wrong near 2**52 where the addition rounds
    mag = np.abs(a)
    whole = np.floor(mag)
    whole += (mag - whole) >= 0.5
    return np.copysign(whole, a)


def encode_fixed(x, cfg: FixedPointConfig = FixedPointConfig()):
    """Encode real(s) as ``round(x * 2**frac_bits) mod 2**ring_bits``.

    Rounds half away from zero.  Scalars map to ``numpy.uint64`` scalars and
    arrays to uint64 arrays of the same shape.

    Raises
    ------
    FixedPointOverflow
        If any ``|x| >= 2**(ring_bits - frac_bits - 1)`` or is not finite.
    """
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)) or np.any(np.abs(a) >= cfg.limit):
        bad = a[~np.isfinite(a) | (np.abs(a) >= cfg.limit)]
        raise FixedPointOverflow(
            f"value {bad.flat[0]!r} outside the representable range "
            f"(-{cfg.limit:g}, {cfg.limit:g})"
        )
    scaled = _round_half_away(a * float(cfg.scale))
    out = _from_signed(scaled.astype(np.int64), cfg.ring_bits)
    return out[()] if out.ndim == 0 else out


def decode_fixed(e, cfg: FixedPointConfig = FixedPointConfig()):
    """Inverse of :func:`encode_fixed`: ``signed(e) / 2**frac_bits``."""
    s = to_signed(e, cfg.ring_bits)
    out = np.asarray(s, dtype=np.float64) / float(cfg.scale)
    return float(out) if out.ndim == 0 else out


def truncate(e, cfg: FixedPointConfig = FixedPointConfig()):
    """Drop ``frac_bits`` fractional bits from a double-scaled ring value.

    Arithmetic right shift on the signed interpretation, i.e. floor division
    by ``2**frac_bits``.
    """
    s = np.asarray(to_signed(e, cfg.ring_bits), dtype=np.int64)
    out = _from_signed(s >> cfg.frac_bits, cfg.ring_bits)
    return out[()] if out.ndim == 0 else out


# -- serialization ----------------------------------------------------------

_DIMS = struct.Struct("<II")


def _word_dtype(bits: int) -> str:
    return "<u8" if bits == 64 else "<u4"


def matrix_nbytes(rows: int, cols: int, bits: int = 64) -> int:
    """Serialized size of a dense ``rows x cols`` ring matrix."""
    return _DIMS.size + rows * cols * (bits // 8)


def pack_matrix(m, bits: int = 64) -> bytes:
    """Two little-endian u32 dims, then row-major little-endian words."""
    m = np.asarray(m, dtype=np.uint64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d matrix, got shape {m.shape}")
    rows, cols = m.shape
    return _DIMS.pack(rows, cols) + np.ascontiguousarray(m.astype(_word_dtype(bits))).tobytes()


def unpack_matrix(buf, offset: int = 0, bits: int = 64) -> tuple[np.ndarray, int]:
    """Read one matrix written by :func:`pack_matrix`.

    Returns the matrix and the offset just past it.
    """
    if len(buf) - offset < _DIMS.size:
        raise ValueError("truncated matrix header")
    rows, cols = _DIMS.unpack_from(buf, offset)
    offset += _DIMS.size
    n = rows * cols * (bits // 8)
    if len(buf) - offset < n:
        raise ValueError(f"truncated matrix body: need {n} bytes, have {len(buf) - offset}")
    m = np.frombuffer(buf, dtype=_word_dtype(bits), count=rows * cols, offset=offset)
    return m.astype(np.uint64).reshape(rows, cols), offset + n
