"""Bit-level codec for the packed bfloat16 ("pbf16") format.

A merged magnitude is stored as a bfloat16 whose exponent has been clamped
into [112, 143] so it fits in 5 bits.  That frees the top four bits of the
word, which carry the sign and mask bits of both experts of a merged pair::

    bit 15      sign of expert 0
    bit 14      sign of expert 1
    bit 13      mask of expert 0
    bit 12      mask of expert 1
    bits 11-7   exponent - 112
    bits 6-0    mantissa

All functions accept numpy arrays or plain Python ints; ints go in, ints
come out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import ShapeMismatch

if TYPE_CHECKING:
    from .merge import MergeArtifacts

EXP_MIN = 112
EXP_MAX = 143
EXP_BIAS = 127

SIGN_BIT = 0x8000
EXP_FIELD = 0x7F80
MANT_FIELD = 0x007F
SHIFTED_EXP_FIELD = 0x0F80
HEADER_FIELD = 0xF000


@dataclass
class SaturationCounter:
    """Counts exponents clamped by :func:`shift_exponent`.

    ``low`` counts exponents below 112 (rounded up, including exact zeros),
    ``high`` counts exponents above 143 (clamped down).
    """

    low: int = 0
    high: int = 0

    @property
    def total(self) -> int:
        return self.low + self.high

    def merge(self, other: "SaturationCounter") -> "SaturationCounter":
        self.low += other.low
        self.high += other.high
        return self


def _as_u16(x):
    scalar = np.isscalar(x) or np.ndim(x) == 0
    return np.asarray(x, dtype=np.uint16), scalar


def _ret(arr, scalar):
    return int(arr) if scalar else arr


def f32_to_bf16(x) -> np.ndarray:
    """Round float32 values to bfloat16 bit patterns (round to nearest even)."""
    a = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise ValueError("bfloat16 conversion requires finite values")
    u = a.view(np.uint32) if a.ndim else a.reshape(1).view(np.uint32)
    bias = ((u >> 16) & 1) + np.uint32(0x7FFF)
    out = ((u + bias) >> 16).astype(np.uint16)
    return out if a.ndim else out.reshape(())


def bf16_to_f32(bits) -> np.ndarray:
    """Widen bfloat16 bit patterns to float32 (exact)."""
    b = np.asarray(bits, dtype=np.uint16)
    return (b.astype(np.uint32) << 16).view(np.float32)


def round_to_bf16(x) -> np.ndarray:
    """Round float32 values onto the bfloat16 grid, returned as float32."""
    return bf16_to_f32(f32_to_bf16(x))


def exponent_field(bits):
    b, scalar = _as_u16(bits)
    return _ret(((b & EXP_FIELD) >> 7).astype(np.uint16), scalar)


def shift_exponent(bits, counter: SaturationCounter | None = None):
    """Clamp the exponent of non-negative bf16 words into [112, 143].

    The mantissa is kept.  Exact zero (exponent 0) is treated like any other
    small exponent and becomes ``2**-15``.  Pass a :class:`SaturationCounter`
    to record how many words were clamped.
    """
    b, scalar = _as_u16(bits)
    if np.any(b & SIGN_BIT):
        raise ValueError("shift_exponent expects non-negative magnitudes")
    exp = (b & EXP_FIELD) >> 7
    if np.any(exp == 0xFF):
        raise ValueError("shift_exponent got NaN or Inf")
    low = exp < EXP_MIN
    high = exp > EXP_MAX
    if counter is not None:
        counter.low += int(np.count_nonzero(low))
        counter.high += int(np.count_nonzero(high))
    clamped = np.clip(exp, EXP_MIN, EXP_MAX).astype(np.uint16)
    out = ((clamped << 7) | (b & MANT_FIELD)).astype(np.uint16)
    return _ret(out, scalar)


def shifted_code(bits):
    """The 5-bit exponent code of an already shifted magnitude."""
    exp = exponent_field(bits)
    return exp - EXP_MIN


def pack_word(magnitude, s0, s1, m0, m1):
    """Pack a shifted magnitude with two sign and two mask bits."""
    mag, scalar = _as_u16(magnitude)
    exp = (mag & EXP_FIELD) >> 7
    if np.any(mag & SIGN_BIT) or np.any((exp < EXP_MIN) | (exp > EXP_MAX)):
        raise ValueError("pack_word expects an exponent-shifted non-negative magnitude")
    header = (
        (np.asarray(s0, dtype=np.uint16) << 15)
        | (np.asarray(s1, dtype=np.uint16) << 14)
        | (np.asarray(m0, dtype=np.uint16) << 13)
        | (np.asarray(m1, dtype=np.uint16) << 12)
    )
    payload = ((exp - EXP_MIN) << 7) | (mag & MANT_FIELD)
    return _ret((header | payload).astype(np.uint16), scalar)


def decode_word(packed, expert_pos: int):
    """Decode the bf16 weight of expert ``expert_pos`` from a packed word."""
    if expert_pos not in (0, 1):
        raise ValueError(f"expert_pos must be 0 or 1, got {expert_pos!r}")
    p, scalar = _as_u16(packed)
    mask = (p >> (13 - expert_pos)) & 1
    sign = (p >> (15 - expert_pos)) & 1
    exp = (p & SHIFTED_EXP_FIELD) + (EXP_MIN << 7)
    word = (sign << 15) | exp | (p & MANT_FIELD)
    out = np.where(mask == 1, word, 0).astype(np.uint16)
    return _ret(out, scalar)


@dataclass
class PackedExpertPair:
    words: np.ndarray
    pair_id: tuple[int, int] = (0, 1)
    saturation: SaturationCounter = field(default_factory=SaturationCounter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.words.shape

    @property
    def nbytes(self) -> int:
        return self.words.size * 2


def pack_pair(
    artifacts: "MergeArtifacts",
    pair_id: tuple[int, int] = (0, 1),
    counter: SaturationCounter | None = None,
) -> PackedExpertPair:
    """Round the merged magnitudes to bf16 and pack them with masks and signs."""
    mats = (artifacts.w_merged, artifacts.s_i, artifacts.s_j, artifacts.masks.m_i, artifacts.masks.m_j)
    shape = np.shape(mats[0])
    if any(np.shape(m) != shape for m in mats[1:]):
        raise ShapeMismatch(f"artifact shapes disagree: {[np.shape(m) for m in mats]}")
    local = SaturationCounter()
    mag = shift_exponent(f32_to_bf16(np.abs(artifacts.w_merged)), local)
    words = pack_word(mag, artifacts.s_i, artifacts.s_j, artifacts.masks.m_i, artifacts.masks.m_j)
    if counter is not None:
        counter.merge(local)
    return PackedExpertPair(np.asarray(words, dtype=np.uint16).reshape(shape), tuple(pair_id), local)


def unpack_pair_bits(p: PackedExpertPair, expert_pos: int) -> np.ndarray:
    return decode_word(p.words, expert_pos)


def unpack_pair(p: PackedExpertPair, expert_pos: int) -> np.ndarray:
    """Materialize the dense reconstruction of one expert as float32."""
    return bf16_to_f32(unpack_pair_bits(p, expert_pos))
