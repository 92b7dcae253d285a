"""Fixed-point tensors over the ring Z_{2^64}.

Real values are encoded as ``round(x * 2**f)`` stored in ``uint64`` residues.
Negative values use two's complement, so residues ``>= 2**63`` decode as
negatives. All arithmetic wraps modulo ``2**64``; numpy's unsigned integer
arithmetic already does so silently for arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

RING_BITS = 64
DEFAULT_FRAC_BITS = 16
MAX_MAGNITUDE = 2.0**20
MIN_FRAC_BITS, MAX_FRAC_BITS = 8, 32

FXT_MAGIC = b"FXT1"


class RangeError(ValueError):
    """A real value is too large to encode without semantic wrap-around."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or scales."""


@dataclass(frozen=True)
class FixedTensor:
    """A shaped array of ring residues carrying a fixed-point scale ``2**frac_bits``."""

    data: np.ndarray
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        if self.data.dtype != np.uint64:
            object.__setattr__(self, "data", np.asarray(self.data).astype(np.uint64))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def reshape(self, *shape) -> FixedTensor:
        return FixedTensor(self.data.reshape(*shape), self.frac_bits)

    def __add__(self, other):
        return ring_add(self, other)

    def __sub__(self, other):
        return ring_sub(self, other)

    def __neg__(self):
        return FixedTensor(np.uint64(0) - self.data, self.frac_bits)

    def __eq__(self, other):
        if not isinstance(other, FixedTensor):
            return NotImplemented
        return (
            self.frac_bits == other.frac_bits
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None

    def signed(self) -> np.ndarray:
        return self.data.view(np.int64)

    def tobytes(self) -> bytes:
        return serialize_tensor(self)


def _check_frac_bits(frac_bits: int) -> None:
    if not MIN_FRAC_BITS <= frac_bits <= MAX_FRAC_BITS:
        raise ValueError(f"frac_bits must lie in [{MIN_FRAC_BITS}, {MAX_FRAC_BITS}], got {frac_bits}")


def encode_fixed(x, frac_bits: int = DEFAULT_FRAC_BITS) -> FixedTensor:
    """Encode a real array as fixed point.

    Raises:
        RangeError: if any ``|x| >= 2**20``; the message names the first
            offending index.
        ValueError: for non-finite input or ``frac_bits`` outside [8, 32].
    """
    _check_frac_bits(frac_bits)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise ValueError(f"non-finite value at index {idx}")
    bad = np.abs(x) >= MAX_MAGNITUDE
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise RangeError(f"|x| >= 2^20 at index {idx}: {x[idx]!r}")
    scaled = np.rint(x * float(2**frac_bits)).astype(np.int64)
    return FixedTensor(scaled.view(np.uint64), frac_bits)


def decode_fixed(t: FixedTensor) -> np.ndarray:
    """Decode to float64, interpreting residues as signed two's complement."""
    return t.data.view(np.int64).astype(np.float64) / float(2**t.frac_bits)


def _check_compatible(a: FixedTensor, b: FixedTensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.frac_bits != b.frac_bits:
        raise ShapeError(f"frac_bits mismatch: {a.frac_bits} vs {b.frac_bits}")


def ring_add(a: FixedTensor, b: FixedTensor) -> FixedTensor:
    _check_compatible(a, b)
    return FixedTensor(a.data + b.data, a.frac_bits)


def ring_sub(a: FixedTensor, b: FixedTensor) -> FixedTensor:
    _check_compatible(a, b)
    return FixedTensor(a.data - b.data, a.frac_bits)


def ring_mul(a: FixedTensor, b: FixedTensor) -> FixedTensor:
    """Elementwise product; the result carries scale ``2**(2f)`` until truncated."""
    _check_compatible(a, b)
    return FixedTensor(a.data * b.data, a.frac_bits + b.frac_bits)


def ring_scale(a: FixedTensor, k: int) -> FixedTensor:
    """Multiply by a public integer without changing the scale."""
    return FixedTensor(a.data * np.uint64(k % 2**64), a.frac_bits)


def ring_matmul(a: FixedTensor, b: FixedTensor) -> FixedTensor:
    """Matrix product modulo ``2**64`` at scale ``2**(2f)``, pending truncation."""
    if a.frac_bits != b.frac_bits:
        raise ShapeError(f"frac_bits mismatch: {a.frac_bits} vs {b.frac_bits}")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    return FixedTensor(np.matmul(a.data, b.data), a.frac_bits + b.frac_bits)


def truncate(t: FixedTensor, by_bits: int) -> FixedTensor:
    """Arithmetic shift right of the signed value, i.e. floor division by ``2**by_bits``."""
    shifted = t.data.view(np.int64) >> np.int64(by_bits)
    return FixedTensor(shifted.view(np.uint64), t.frac_bits - by_bits)


def truncate_share(t: FixedTensor, by_bits: int, party: int) -> FixedTensor:
    """Local truncation of one additive share of a two-party sharing.

    Party 0 shifts its share, party 1 shifts the negation of its share and
    negates back. The reconstructed result is within one ulp of the exact
    rescale unless the two signed shares straddle the wrap point, which for a
    secret of magnitude ``|x|`` (raw ring units) happens with probability about
    ``|x| / 2**64``.
    """
    if party == 0:
        return truncate(t, by_bits)
    neg = (np.uint64(0) - t.data).view(np.int64) >> np.int64(by_bits)
    return FixedTensor(np.uint64(0) - neg.view(np.uint64), t.frac_bits - by_bits)


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2**64, size=shape, dtype=np.uint64)


def serialize_tensor(t: FixedTensor) -> bytes:
    """``FXT1`` | frac_bits:u8 | rank:u8 | dims:u32* | data:u64* (little-endian)."""
    dims = t.data.shape
    header = FXT_MAGIC + struct.pack("<BB", t.frac_bits, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    return header + np.ascontiguousarray(t.data).astype("<u8").tobytes()


def deserialize_tensor(buf: bytes, offset: int = 0) -> tuple[FixedTensor, int]:
    """Parse one ``FXT1`` tensor starting at ``offset``; returns the tensor and the end offset."""
    if buf[offset:offset + 4] != FXT_MAGIC:
        raise ValueError("bad tensor magic")
    frac_bits, rank = struct.unpack_from("<BB", buf, offset + 4)
    pos = offset + 6
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    end = pos + 8 * n
    if end > len(buf):
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<u8", count=n, offset=pos).astype(np.uint64).reshape(dims)
    return FixedTensor(data, frac_bits), end


def serialize_tensors(tensors) -> bytes:
    return b"".join(serialize_tensor(t) for t in tensors)


def deserialize_tensors(buf: bytes) -> list[FixedTensor]:
    out, pos = [], 0
    while pos < len(buf):
        t, pos = deserialize_tensor(buf, pos)
        out.append(t)
    return out
