"""Group quantization of merged magnitudes and average bit-width accounting."""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidBits


def quantize_group(w_merged, bits: int, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantize non-negative magnitudes in contiguous groups of the flattened tensor.

    Levels are 0..2**bits-1 with ``scale = max(group) / (2**bits - 1)``, so no
    zero point is needed; codes round half up.  The last group may be short.  Returns
    ``(codes, scales)`` with codes shaped like the input.
    """
    if not isinstance(bits, (int, np.integer)) or bits < 2 or bits > 16:
        raise InvalidBits(f"bits must be an integer in [2, 16], got {bits!r}")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    w = np.asarray(w_merged, dtype=np.float32)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("quantize_group expects finite non-negative magnitudes")
    flat = w.ravel()
    qmax = (1 << bits) - 1
    n_groups = -(-flat.size // group_size)
    scales = np.empty(n_groups, dtype=np.float32)
    codes = np.empty(flat.size, dtype=np.uint16)
    for g in range(n_groups):
        chunk = flat[g * group_size:(g + 1) * group_size].astype(np.float64)
        m = chunk.max()
        if m > 0:
            scales[g] = np.float32(m / qmax)
            # value * qmax / max rather than value / scale: the stored f32 scale is rounded
            q = np.floor(chunk * qmax / m + 0.5)
        else:
            scales[g] = np.float32(1.0)
            q = np.zeros_like(chunk)
        codes[g * group_size:(g + 1) * group_size] = np.clip(q, 0, qmax)
    return codes.reshape(w.shape), scales


def dequantize_group(codes, scales, group_size: int) -> np.ndarray:
    c = np.asarray(codes)
    per_elem = np.repeat(np.asarray(scales, dtype=np.float32), group_size)[: c.size]
    return (c.ravel().astype(np.float32) * per_elem).reshape(c.shape)


def avg_bitwidth(quant_bits: int, group_size: int, scale_bits: int) -> float:
    """Bits per original weight for a quantized merged pair.

    Each stored element serves two experts and carries two sign bits, a
    three-state mask (log2 3 bits), the quantized magnitude and its share of
    the group scale.
    """
    if quant_bits <= 0 or group_size <= 0 or scale_bits <= 0:
        raise ValueError("all arguments must be positive")
    return (2 + math.log2(3) + quant_bits + scale_bits / group_size) / 2


def pack_codes(codes, bits: int) -> bytes:
    """Pack integer codes into a little-endian bitstream, ``bits`` per code."""
    c = np.asarray(codes, dtype=np.uint32).ravel()
    if c.size and int(c.max()) >= 1 << bits:
        raise InvalidBits(f"code does not fit in {bits} bits")
    planes = ((c[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: count * bits]
    planes = flat.reshape(count, bits).astype(np.uint32)
    return (planes << np.arange(bits, dtype=np.uint32)).sum(axis=1).astype(np.uint16)
