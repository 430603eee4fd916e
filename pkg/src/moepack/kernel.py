"""Matrix-vector kernels over dense and packed expert weights.

Every kernel accumulates each output row in a single float32 accumulator in
ascending column order, so the packed kernel and the dense kernel run on the
decoded matrix agree bit for bit.  The packed kernels decode each weight
inside the inner loop and never build the dense matrix.
"""

from __future__ import annotations

import statistics
import time

import numpy as np
from numba import njit

from .bitcodec import PackedExpertPair, f32_to_bf16, pack_word, unpack_pair_bits
from .errors import DimensionMismatch


@njit(cache=True)
def _gemm_f32(w, xs):
    rows, cols = w.shape
    out = np.empty((xs.shape[0], rows), dtype=np.float32)
    for t in range(xs.shape[0]):
        x = xs[t]
        for o in range(rows):
            acc = np.float32(0.0)
            for c in range(cols):
                acc += w[o, c] * x[c]
            out[t, o] = acc
    return out


@njit(cache=True)
def _gemm_bf16(bits, xs):
    rows, cols = bits.shape
    scratch = np.empty(1, dtype=np.uint32)
    val = scratch.view(np.float32)
    out = np.empty((xs.shape[0], rows), dtype=np.float32)
    for t in range(xs.shape[0]):
        x = xs[t]
        for o in range(rows):
            acc = np.float32(0.0)
            for c in range(cols):
                scratch[0] = np.uint32(bits[o, c]) << 16
                acc += val[0] * x[c]
            out[t, o] = acc
    return out


@njit(cache=True)
def _gemm_packed(words, expert_pos, xs):
    rows, cols = words.shape
    mask_shift = 13 - expert_pos
    sign_shift = 15 - expert_pos
    scratch = np.empty(1, dtype=np.uint32)
    val = scratch.view(np.float32)
    out = np.empty((xs.shape[0], rows), dtype=np.float32)
    for t in range(xs.shape[0]):
        x = xs[t]
        for o in range(rows):
            acc = np.float32(0.0)
            for c in range(cols):
                p = np.uint32(words[o, c])
                mask = (p >> mask_shift) & 1
                sign = (p >> sign_shift) & 1
                exp = (p & 0x0F80) + (112 << 7)
                # branch-free: a pruned weight becomes the word 0, i.e. +0.0
                w = ((sign << 15) | exp | (p & 0x007F)) * mask
                scratch[0] = np.uint32(w) << 16
                acc += val[0] * x[c]
            out[t, o] = acc
    return out


def _as_batch(x, cols: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float32)
    single = a.ndim == 1
    a = np.ascontiguousarray(a.reshape(1, -1) if single else a)
    if a.ndim != 2 or a.shape[1] != cols:
        raise DimensionMismatch(f"input width {a.shape[-1]} does not match in_features {cols}")
    if not np.all(np.isfinite(a)):
        raise ValueError("input activations must be finite")
    return a, single


def _finish(y: np.ndarray, single: bool) -> np.ndarray:
    return y[0] if single else y


def gemv_reference(w, x) -> np.ndarray:
    """Dense float32 product ``w @ x``; ``x`` may also be a (T, in) batch of rows."""
    w = np.ascontiguousarray(w, dtype=np.float32)
    xs, single = _as_batch(x, w.shape[1])
    return _finish(_gemm_f32(w, xs), single)


def gemv_bf16(bits, x) -> np.ndarray:
    """Dense product reading bf16 bit patterns, widened in the inner loop."""
    bits = np.ascontiguousarray(bits, dtype=np.uint16)
    xs, single = _as_batch(x, bits.shape[1])
    return _finish(_gemm_bf16(bits, xs), single)


def gemv_fused(p: PackedExpertPair, expert_pos: int, x) -> np.ndarray:
    """Product with the weights of expert ``expert_pos`` decoded on the fly."""
    if expert_pos not in (0, 1):
        raise ValueError(f"expert_pos must be 0 or 1, got {expert_pos!r}")
    words = np.ascontiguousarray(p.words, dtype=np.uint16)
    xs, single = _as_batch(x, words.shape[1])
    return _finish(_gemm_packed(words, expert_pos, xs), single)


def random_packed_pair(rows: int, cols: int, rng: np.random.Generator) -> PackedExpertPair:
    """A packed pair with in-range magnitudes and complete masks."""
    mag = np.abs(rng.standard_normal((rows, cols), dtype=np.float32)) * np.float32(0.05)
    bits = f32_to_bf16(mag)
    exp = np.clip((bits >> 7) & 0xFF, 112, 143).astype(np.uint16)
    bits = ((exp << 7) | (bits & 0x7F)).astype(np.uint16)
    which = rng.integers(0, 3, size=(rows, cols))  # 0: both, 1: only expert 0, 2: only expert 1
    m0 = (which != 2).astype(np.uint16)
    m1 = (which != 1).astype(np.uint16)
    s0 = rng.integers(0, 2, size=(rows, cols))
    s1 = rng.integers(0, 2, size=(rows, cols))
    return PackedExpertPair(pack_word(bits, s0, s1, m0, m1))


def _median_ns(fn, iters: int) -> int:
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return max(1, int(statistics.median(samples)))


def bench_gemv(rows: int, cols: int, iters: int, seed: int) -> dict:
    """Time the fused, dense and decode-then-dense paths on one random pair."""
    if rows < 1 or cols < 1 or iters < 1:
        raise ValueError("rows, cols and iters must be >= 1")
    rng = np.random.default_rng(seed)
    p = random_packed_pair(rows, cols, rng)
    x = rng.standard_normal(cols, dtype=np.float32)
    dense = unpack_pair_bits(p, 0)

    def fused():
        return gemv_fused(p, 0, x)

    def reference():
        return gemv_bf16(dense, x)

    def decode_then_dense():
        return gemv_bf16(unpack_pair_bits(p, 0), x)

    for fn in (fused, reference, decode_then_dense):
        fn()  # JIT warm-up

    n = rows * cols
    report = {
        "rows": rows,
        "cols": cols,
        "iters": iters,
        "seed": seed,
        "fused_ns_per_call": _median_ns(fused, iters),
        "reference_ns_per_call": _median_ns(reference, iters),
        "decode_then_dense_ns_per_call": _median_ns(decode_then_dense, iters),
        # weight traffic only: packed read; dense read; packed read + dense write + dense reread
        "fused_bytes_per_call": 2 * n,
        "reference_bytes_per_call": 2 * n,
        "decode_then_dense_bytes_per_call": 6 * n,
        # a single timed call has no spread to take a median over
        "low_confidence": iters == 1,
    }
    return report
