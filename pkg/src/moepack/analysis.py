"""Weight statistics: exponent histograms, correlation, similar-entry fractions."""

from __future__ import annotations

import math

import numpy as np

from .bitcodec import EXP_MAX, EXP_MIN, f32_to_bf16
from .errors import DegenerateVariance, DomainError, ShapeMismatch
from .merge import similarity_delta


def exponent_histogram(t) -> dict:
    """Counts of bf16 exponent fields and the share inside [112, 143]."""
    bits = f32_to_bf16(np.asarray(t, dtype=np.float32)).ravel()
    counts = np.bincount((bits >> 7) & 0xFF, minlength=256)
    n = int(counts.sum())
    inside = int(counts[EXP_MIN:EXP_MAX + 1].sum())
    return {"counts": counts, "fraction_in_range": inside / n if n else 1.0}


def pearson_pairwise(a, b) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {np.shape(a)} vs {np.shape(b)}")
    if x.size < 2:
        raise DegenerateVariance("need at least two elements")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = math.sqrt(float(x @ x)), math.sqrt(float(y @ y))
    if sx == 0 or sy == 0:
        raise DegenerateVariance("zero variance")
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def similarity_fraction_closed(sigma_ratio: float, tau: float) -> float:
    """Probability that two independent zero-mean Gaussian weights are tau-similar.

    ``sigma_ratio`` is sigma2 / sigma1.  With r = |w1|/|w2| following the
    half-normal ratio law, the event is (1-tau)/(1+tau) < r < (1+tau)/(1-tau),
    whose probability has an arctan closed form.  tau = 1 is excluded (the
    limit is 1).
    """
    if not sigma_ratio > 0:
        raise DomainError(f"sigma_ratio must be > 0, got {sigma_ratio}")
    if not 0.0 <= tau < 1.0:
        raise DomainError(f"tau must lie in [0, 1), got {tau}")
    hi = (1 + tau) / (1 - tau)
    lo = (1 - tau) / (1 + tau)
    return 2.0 / math.pi * (math.atan(sigma_ratio * hi) - math.atan(sigma_ratio * lo))


def similarity_fraction_mc(
    sigma1: float, sigma2: float, tau: float, n_samples: int, seed: int, n_shards: int = 8
) -> float:
    """Monte Carlo estimate of the same probability (strict inequality).

    Samples are split into shards, each with its own spawned stream, so the
    result depends only on (seed, n_samples, n_shards).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if sigma1 <= 0 or sigma2 <= 0:
        raise DomainError("sigmas must be > 0")
    n_shards = max(1, min(n_shards, n_samples))
    sizes = [n_samples // n_shards + (k < n_samples % n_shards) for k in range(n_shards)]
    hits = 0
    for size, ss in zip(sizes, np.random.SeedSequence(seed).spawn(n_shards)):
        rng = np.random.default_rng(ss)
        a = np.abs(rng.normal(0.0, sigma1, size))
        b = np.abs(rng.normal(0.0, sigma2, size))
        hits += int(np.count_nonzero(np.abs(a - b) < tau * (a + b)))
    return hits / n_samples


def measured_similarity_fraction(a, b, tau: float) -> float:
    """Fraction of entries whose magnitude difference is within ``tau``."""
    delta = similarity_delta(a, b)
    return float(np.count_nonzero(delta <= np.float32(tau)) / delta.size) if delta.size else 1.0
