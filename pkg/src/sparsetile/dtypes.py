"""Element types understood by the tile kernels.

BF16 values travel as ``numpy.uint16`` arrays holding the bit pattern (the
upper half of an IEEE float32).  INT8 values are plain ``numpy.int8``.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

_U16 = np.uint32(16)


class Dtype(Enum):
    """Operand element type of a packed tensor."""

    BF16 = "bf16"
    INT8 = "int8"

    @property
    def element_bits(self) -> int:
        return 16 if self is Dtype.BF16 else 8

    @property
    def element_bytes(self) -> int:
        return self.element_bits // 8

    @property
    def storage(self) -> np.dtype:
        """numpy dtype used to store one element."""
        return np.dtype(np.uint16) if self is Dtype.BF16 else np.dtype(np.int8)

    @classmethod
    def parse(cls, value: "str | Dtype") -> "Dtype":
        if isinstance(value, Dtype):
            return value
        text = str(value).strip().lower()
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"Unknown dtype '{value}' (expected one of: bf16, int8)")


def to_bf16(x: np.ndarray) -> np.ndarray:
    """Round float values to BF16 (nearest-even) and return the uint16 bit patterns."""
    f = np.ascontiguousarray(x, dtype=np.float32)
    bits = f.view(np.uint32)
    rounding = ((bits >> _U16) & np.uint32(1)) + np.uint32(0x7FFF)
    out = ((bits + rounding) >> _U16).astype(np.uint16)
    nan = np.isnan(f)
    if nan.any():
        # keep NaN a (quiet) NaN instead of letting rounding carry into the exponent
        out[nan] = ((bits[nan] >> _U16) | np.uint32(0x0040)).astype(np.uint16)
    return out


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    """Widen BF16 bit patterns to float32 (exact)."""
    wide = np.ascontiguousarray(bits, dtype=np.uint16).astype(np.uint32) << _U16
    return wide.view(np.float32)


def as_bf16(x: np.ndarray) -> np.ndarray:
    """Accept BF16 bit patterns (uint16) as-is, round anything else."""
    arr = np.asarray(x)
    if arr.dtype == np.uint16:
        return arr
    return to_bf16(arr)


def bf16_round(x: np.ndarray) -> np.ndarray:
    """Round to BF16 precision and return float32 values."""
    return bf16_to_f32(to_bf16(x))
