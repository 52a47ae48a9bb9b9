"""Numeric formats, fixed-point codec, bit-flip mutation, and the clip primitive.

Two element formats are supported: IEEE float32 and two's-complement Q-format
fixed point (16 or 32 bits total). Fixed-point raws are kept as Python ints /
int64 arrays; the representable range is enforced by value, with saturation on
every write.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np


class NumericsError(ValueError):
    pass


class CorrectionPolicy(Enum):
    """What to do with a value that falls outside a restriction range."""

    TO_BOUND = "to-bound"
    TO_ZERO = "to-zero"
    RANDOM_IN_RANGE = "random"

    @classmethod
    def from_name(cls, name: str) -> "CorrectionPolicy":
        for p in cls:
            if p.value == name:
                return p
        raise NumericsError(f"unknown correction policy {name!r}")


@dataclass(frozen=True)
class NumericFormat:
    """float32 or fixed{total_bits, frac_bits} two's-complement Q format."""

    kind: str  # "float32" | "fixed"
    total_bits: int = 32
    frac_bits: int = 0

    def __post_init__(self):
        if self.kind == "float32":
            if self.total_bits != 32 or self.frac_bits != 0:
                raise NumericsError("float32 format takes no bit parameters")
        elif self.kind == "fixed":
            if self.total_bits not in (16, 32):
                raise NumericsError("fixed formats are 16 or 32 bits wide")
            if not 0 <= self.frac_bits < self.total_bits:
                raise NumericsError("frac_bits must be in [0, total_bits)")
        else:
            raise NumericsError(f"unknown format kind {self.kind!r}")

    # -- constructors ------------------------------------------------

    @classmethod
    def float32(cls) -> "NumericFormat":
        return cls("float32")

    @classmethod
    def fixed(cls, total_bits: int, frac_bits: int) -> "NumericFormat":
        return cls("fixed", total_bits, frac_bits)

    @classmethod
    def fixed16(cls, frac_bits: int = 2) -> "NumericFormat":
        # 16-bit default splits 14 integer / 2 fractional bits.
        return cls("fixed", 16, frac_bits)

    @classmethod
    def fixed32(cls, frac_bits: int = 10) -> "NumericFormat":
        return cls("fixed", 32, frac_bits)

    @classmethod
    def from_name(cls, name: str) -> "NumericFormat":
        """Parse 'float32', 'fixed16', 'fixed32', or 'fixed<T>q<F>'."""
        if name == "float32":
            return cls.float32()
        if name == "fixed16":
            return cls.fixed16()
        if name == "fixed32":
            return cls.fixed32()
        if name.startswith("fixed") and "q" in name:
            total, frac = name[len("fixed"):].split("q", 1)
            return cls.fixed(int(total), int(frac))
        raise NumericsError(f"unknown numeric format {name!r}")

    # -- properties --------------------------------------------------

    @property
    def is_float(self) -> bool:
        return self.kind == "float32"

    @property
    def width(self) -> int:
        return self.total_bits

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def qmin(self) -> int:
        """Smallest raw value (fixed only)."""
        return -(1 << (self.total_bits - 1))

    @property
    def qmax(self) -> int:
        """Largest raw value (fixed only)."""
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_value(self) -> float:
        return self.qmin / self.scale

    @property
    def max_value(self) -> float:
        return self.qmax / self.scale

    @property
    def name(self) -> str:
        if self.is_float:
            return "float32"
        if (self.total_bits, self.frac_bits) in ((16, 2), (32, 10)):
            return f"fixed{self.total_bits}"
        return f"fixed{self.total_bits}q{self.frac_bits}"


FLOAT32 = NumericFormat.float32()
FIXED16 = NumericFormat.fixed16()
FIXED32 = NumericFormat.fixed32()


# -- scalar codec ----------------------------------------------------


def encode(value: float, fmt: NumericFormat) -> int:
    """Encode a real value into the format's raw bit representation.

    Fixed point rounds half away from zero and saturates at the range ends.
    float32 returns the IEEE-754 bit pattern of the nearest float32.
    """
    if fmt.is_float:
        return struct.unpack("<I", struct.pack("<f", float(value)))[0]
    v = float(value)
    if math.isnan(v):
        return 0
    raw = int(math.floor(abs(v) * fmt.scale + 0.5))
    if v < 0:
        raw = -raw
    return min(max(raw, fmt.qmin), fmt.qmax)


def decode(raw: int, fmt: NumericFormat) -> float:
    """Inverse of encode on representable values."""
    if fmt.is_float:
        return struct.unpack("<f", struct.pack("<I", raw & 0xFFFFFFFF))[0]
    return raw / fmt.scale


def quantize_array(values: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    """Vectorized encode: float32 array, or int64 array of saturated raws."""
    if fmt.is_float:
        return np.asarray(values, dtype=np.float32)
    v = np.asarray(values, dtype=np.float64)
    raw = np.floor(np.abs(v) * fmt.scale + 0.5)
    raw = np.where(v < 0, -raw, raw)
    raw = np.where(np.isnan(v), 0.0, raw)
    return np.clip(raw, fmt.qmin, fmt.qmax).astype(np.int64)


def dequantize_array(raws: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    if fmt.is_float:
        return np.asarray(raws, dtype=np.float32)
    return np.asarray(raws, dtype=np.float64) / fmt.scale


# -- bit flips -------------------------------------------------------


def flip_bits(raw: int, positions: Iterable[int], fmt: NumericFormat) -> int:
    """XOR the stated bit positions of a raw representation.

    Involution: applying the same positions twice restores the input.
    Fixed-point raws are flipped in their two's-complement image and
    sign-extended back.
    """
    pos = list(positions)
    if len(set(pos)) != len(pos):
        raise NumericsError("bit positions must be distinct")
    mask = 0
    for p in pos:
        if not 0 <= p < fmt.width:
            raise NumericsError(f"bit position {p} out of width {fmt.width}")
        mask |= 1 << p
    if fmt.is_float:
        return (raw ^ mask) & 0xFFFFFFFF
    full = 1 << fmt.width
    u = (raw & (full - 1)) ^ mask
    return u - full if u & (1 << (fmt.width - 1)) else u


# -- clip primitive --------------------------------------------------


def clip(
    value: float,
    low: float,
    up: float,
    policy: CorrectionPolicy = CorrectionPolicy.TO_BOUND,
    rng: np.random.Generator | None = None,
) -> float:
    """Restrict a value to [low, up] under the given correction policy.

    TO_BOUND truncates to the violated bound, TO_ZERO replaces out-of-range
    values with 0, RANDOM_IN_RANGE redraws them uniformly in [low, up] from
    the caller-owned generator. NaN propagates under TO_BOUND.
    """
    if low > up:
        raise NumericsError(f"invalid range: low {low} > up {up}")
    if policy is CorrectionPolicy.TO_BOUND:
        # mirrors np.minimum(np.maximum(x, low), up), NaN-propagating
        if math.isnan(value):
            return value
        return min(max(value, low), up)
    in_range = low <= value <= up  # False for NaN
    if policy is CorrectionPolicy.TO_ZERO:
        return value if in_range else 0.0
    if policy is CorrectionPolicy.RANDOM_IN_RANGE:
        if in_range:
            return value
        if rng is None:
            raise NumericsError("RANDOM_IN_RANGE requires a generator")
        return float(rng.uniform(low, up))
    raise NumericsError(f"unhandled policy {policy}")


# -- element container -----------------------------------------------


class Tensor:
    """Flat element container in a format's canonical representation.

    float32 tensors hold a float32 ndarray; fixed-point tensors hold int64
    Q-format raws, saturated to the representable range on every write.
    """

    __slots__ = ("shape", "format", "data")

    def __init__(self, shape, fmt: NumericFormat, data: np.ndarray):
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != data.size:
            raise NumericsError(
                f"element count {data.size} != product of shape {shape}"
            )
        want = np.float32 if fmt.is_float else np.int64
        if data.dtype != want:
            raise NumericsError(f"expected dtype {want}, got {data.dtype}")
        self.shape = shape
        self.format = fmt
        self.data = data.reshape(shape)

    @classmethod
    def from_values(cls, values, fmt: NumericFormat, shape=None) -> "Tensor":
        arr = quantize_array(np.asarray(values, dtype=np.float64), fmt)
        if shape is None:
            shape = arr.shape
        return cls(shape, fmt, arr)

    def to_floats(self) -> np.ndarray:
        """Decoded values; float32 passthrough, fixed raws scaled to float64."""
        return dequantize_array(self.data, self.format)

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self, index: int) -> float:
        return float(self.to_floats().reshape(-1)[index])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.shape == other.shape
            and self.format == other.format
            and np.array_equal(self.data, other.data, equal_nan=True)
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, format={self.format.name})"
