"""Dual-mask sparse merging of two expert weight matrices.

Weights are (out_features, in_features); activation norms are per input
feature and broadcast across rows.  All arithmetic is float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidThreshold, ShapeMismatch


@dataclass
class MaskSet:
    m_sim: np.ndarray
    m_sal_i: np.ndarray
    m_sal_j: np.ndarray
    m_i: np.ndarray
    m_j: np.ndarray


@dataclass
class MergeArtifacts:
    w_merged: np.ndarray
    masks: MaskSet
    s_i: np.ndarray
    s_j: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.w_merged.shape


def _f32(w) -> np.ndarray:
    a = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise ValueError("expert weights must be finite")
    return a


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def similarity_delta(w_i, w_j) -> np.ndarray:
    """Symmetric percent difference of magnitudes, in [0, 1].

    Entries where both weights are exactly zero get 0.
    """
    a, b = _f32(w_i), _f32(w_j)
    _check_same(a, b)
    ai, aj = np.abs(a), np.abs(b)
    den = ai + aj
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = np.abs(ai - aj) / den
    return np.where(den == 0, np.float32(0), delta).astype(np.float32)


def build_masks(w_i, w_j, norms_i, norms_j, tau_sim: float) -> MaskSet:
    if not 0.0 <= tau_sim <= 1.0:
        raise InvalidThreshold(f"tau_sim must lie in [0, 1], got {tau_sim}")
    a, b = _f32(w_i), _f32(w_j)
    _check_same(a, b)
    ni = np.asarray(norms_i, dtype=np.float32)
    nj = np.asarray(norms_j, dtype=np.float32)
    if a.ndim != 2 or ni.shape != (a.shape[1],) or nj.shape != (a.shape[1],):
        raise ShapeMismatch(
            f"norms must have length in_features={a.shape[-1]}, got {ni.shape} and {nj.shape}"
        )
    if np.any(ni < 0) or np.any(nj < 0):
        raise ValueError("activation norms must be non-negative")

    m_sim = similarity_delta(a, b) <= np.float32(tau_sim)
    sal_i = np.abs(a) * ni[None, :]
    sal_j = np.abs(b) * nj[None, :]
    m_sal_i = sal_i >= sal_j
    m_sal_j = ~m_sal_i
    u8 = np.uint8
    return MaskSet(
        m_sim=m_sim.astype(u8),
        m_sal_i=m_sal_i.astype(u8),
        m_sal_j=m_sal_j.astype(u8),
        m_i=(m_sal_i | m_sim).astype(u8),
        m_j=(m_sal_j | m_sim).astype(u8),
    )


def merge_pair(w_i, w_j, masks: MaskSet) -> MergeArtifacts:
    a, b = _f32(w_i), _f32(w_j)
    _check_same(a, b)
    for name in ("m_sim", "m_sal_i", "m_sal_j", "m_i", "m_j"):
        if getattr(masks, name).shape != a.shape:
            raise ShapeMismatch(f"mask {name} has shape {getattr(masks, name).shape}, expected {a.shape}")
    ai, aj = np.abs(a), np.abs(b)
    sim = masks.m_sim.astype(bool)
    avg = (ai + aj) / np.float32(2)
    picked = np.where(masks.m_sal_i.astype(bool), ai, aj)
    w_merged = np.where(sim, avg, picked).astype(np.float32)
    return MergeArtifacts(
        w_merged=w_merged,
        masks=masks,
        s_i=(a < 0).astype(np.uint8),
        s_j=(b < 0).astype(np.uint8),
    )


def reconstruct(artifacts: MergeArtifacts, expert_pos: int) -> np.ndarray:
    if expert_pos == 0:
        sign, mask = artifacts.s_i, artifacts.masks.m_i
    elif expert_pos == 1:
        sign, mask = artifacts.s_j, artifacts.masks.m_j
    else:
        raise ValueError(f"expert_pos must be 0 or 1, got {expert_pos!r}")
    w = artifacts.w_merged
    signed = np.where(sign.astype(bool), -w, w)
    # masked-out entries are +0.0, matching the codec
    return np.where(mask.astype(bool), signed, np.float32(0)).astype(np.float32)


def merge_experts(w_i, w_j, norms_i, norms_j, tau_sim: float) -> MergeArtifacts:
    """Masks and merge in one call."""
    return merge_pair(w_i, w_j, build_masks(w_i, w_j, norms_i, norms_j, tau_sim))
