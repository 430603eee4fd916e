"""Choosing which experts of a layer are merged together."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import RatioOutOfRange
from .merge import merge_experts, reconstruct
from .toy_moe import SLOTS

ExpertSet = Mapping[str, np.ndarray]


@dataclass
class LayerPairing:
    pairs: list[tuple[int, int]]
    untouched: list[int]


@dataclass
class PairingPlan:
    layers: list[LayerPairing]
    ratio: float
    seed: int
    n_experts: int
    objective: float | None = field(default=None, compare=False)

    def to_json(self) -> dict:
        out = {
            "ratio": self.ratio,
            "seed": self.seed,
            "n_experts": self.n_experts,
            "layers": [
                {"pairs": [list(p) for p in lp.pairs], "untouched": list(lp.untouched)}
                for lp in self.layers
            ],
        }
        if self.objective is not None:
            out["objective"] = self.objective
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PairingPlan":
        layers = [
            LayerPairing([tuple(p) for p in lp["pairs"]], list(lp["untouched"])) for lp in d["layers"]
        ]
        return cls(layers, float(d["ratio"]), int(d["seed"]), int(d["n_experts"]), d.get("objective"))


def n_pairs(n_experts: int, ratio: float) -> int:
    """Number of pairs for a ratio, rounding half up."""
    if n_experts < 2:
        raise RatioOutOfRange(f"need at least 2 experts to pair, got {n_experts}")
    if not 0.0 <= ratio <= 0.5:
        raise RatioOutOfRange(f"ratio must lie in [0, 0.5], got {ratio}")
    p = math.floor(ratio * n_experts + 0.5)
    if 2 * p > n_experts:
        raise RatioOutOfRange(f"ratio {ratio} needs {p} pairs but only {n_experts} experts exist")
    return p


def _layer_rng(seed: int, layer: int) -> np.random.Generator:
    return np.random.default_rng([seed, layer])


def _from_perm(perm: Sequence[int], p: int) -> LayerPairing:
    pairs = sorted(tuple(sorted((int(perm[2 * k]), int(perm[2 * k + 1])))) for k in range(p))
    return LayerPairing(pairs, sorted(int(e) for e in perm[2 * p:]))


def group_random(n_experts: int, ratio: float, seed: int, n_layers: int = 1) -> PairingPlan:
    """Seeded uniformly random disjoint pairs, drawn independently per layer."""
    p = n_pairs(n_experts, ratio)
    layers = [_from_perm(_layer_rng(seed, li).permutation(n_experts), p) for li in range(n_layers)]
    return PairingPlan(layers, ratio, seed, n_experts)


def _rel_err(approx: np.ndarray, ref: np.ndarray) -> float:
    ref64 = ref.astype(np.float64)
    den = float(np.sum(ref64 * ref64))
    num = float(np.sum((approx.astype(np.float64) - ref64) ** 2))
    return num / den if den > 0 else num


def pair_objective(a: ExpertSet, b: ExpertSet, norms_a: ExpertSet, norms_b: ExpertSet, tau: float) -> float:
    """Normalized squared reconstruction error of both experts, summed over slots."""
    total = 0.0
    for slot in a:
        art = merge_experts(a[slot], b[slot], norms_a[slot], norms_b[slot], tau)
        total += _rel_err(reconstruct(art, 0), a[slot]) + _rel_err(reconstruct(art, 1), b[slot])
    return total


def group_search(
    n_experts: int,
    ratio: float,
    experts: Sequence[Sequence[ExpertSet]],
    stats,
    tau: float,
    budget: int,
    seed: int,
) -> PairingPlan:
    """Local search over pairings, minimizing the merge reconstruction error.

    ``experts[layer][e]`` maps slot names to weight matrices.  Per layer, the
    first candidate is the :func:`group_random` pairing for ``seed``; the
    remaining ``budget - 1`` evaluations are pair-swap moves from the current
    plan with random restarts after a run of non-improving moves.  Returns the
    best plan seen.  ``stats`` may be ``None`` for unit activation norms.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    p = n_pairs(n_experts, ratio)

    def norms(layer, e):
        if stats is None:
            return {s: np.ones(w.shape[1], dtype=np.float32) for s, w in experts[layer][e].items()}
        return {s: stats.get(layer, e, s) for s in experts[layer][e]}

    layers, total = [], 0.0
    for li in range(len(experts)):
        cache: dict[tuple[int, int], float] = {}

        def cost(perm):
            c = 0.0
            for k in range(p):
                key = tuple(sorted((int(perm[2 * k]), int(perm[2 * k + 1]))))
                if key not in cache:
                    i, j = key
                    cache[key] = pair_objective(experts[li][i], experts[li][j], norms(li, i), norms(li, j), tau)
                c += cache[key]
            return c

        perm = _layer_rng(seed, li).permutation(n_experts)
        cur_cost = cost(perm)
        best, best_cost = perm.copy(), cur_cost
        rng = np.random.default_rng([seed, li, 1])
        can_swap = p >= 2 or (p >= 1 and n_experts > 2 * p)
        stall, restart_after = 0, max(4, 2 * n_experts)
        for _ in range(budget - 1):
            if not can_swap:
                break
            restart = stall >= restart_after
            if restart:
                cand = rng.permutation(n_experts)
                stall = 0
            else:
                cand = perm.copy()
                i, j = rng.choice(n_experts, size=2, replace=False)
                while i // 2 == j // 2 and i < 2 * p or (i >= 2 * p and j >= 2 * p):
                    i, j = rng.choice(n_experts, size=2, replace=False)
                cand[i], cand[j] = cand[j], cand[i]
            c = cost(cand)
            if restart or c < cur_cost:
                perm, cur_cost = cand, c
            if c < best_cost:
                best, best_cost, stall = cand.copy(), c, 0
            else:
                stall += 1
        layers.append(_from_perm(best, p))
        total += best_cost
    return PairingPlan(layers, ratio, seed, n_experts, objective=total)


def model_expert_sets(model) -> list[list[dict[str, np.ndarray]]]:
    """Weights of a toy model in the layout :func:`group_search` expects."""
    return [
        [{s: model.expert_weight(li, e, s) for s in SLOTS} for e in range(model.config.n_experts)]
        for li in range(model.config.n_layers)
    ]
