"""End-to-end compression of a toy MoE model, plus the baselines it is compared with."""

from __future__ import annotations

import time

import numpy as np

from .bitcodec import SaturationCounter, pack_pair, round_to_bf16
from .calibration import CalibrationStats, collect_norms
from .grouping import PairingPlan, group_random, group_search, model_expert_sets
from .merge import merge_experts
from .toy_moe import SLOTS, DenseExpert, MoELayer, PackedRef, PackedSlots, ToyMoEModel


def gaussian_tokens(n_tokens: int, d_model: int, seed: int) -> np.ndarray:
    """Seeded synthetic activations standing in for a calibration corpus."""
    return np.random.default_rng(seed).standard_normal((n_tokens, d_model)).astype(np.float32)


def _check_plan(model: ToyMoEModel, plan: PairingPlan) -> None:
    cfg = model.config
    if plan.n_experts != cfg.n_experts or len(plan.layers) != cfg.n_layers:
        raise ValueError("pairing plan does not match the model")
    for li in range(cfg.n_layers):
        if any(model.is_packed(li, e) for e in range(cfg.n_experts)):
            raise ValueError("model is already compressed")


def compress_model(
    model: ToyMoEModel,
    plan: PairingPlan,
    stats: CalibrationStats,
    tau: float,
    counter: SaturationCounter | None = None,
) -> tuple[ToyMoEModel, dict]:
    """Merge and pack every planned pair; untouched experts are kept as is."""
    _check_plan(model, plan)
    counter = counter if counter is not None else SaturationCounter()
    sim_entries = total_entries = 0
    layers = []
    for li, (layer, lp) in enumerate(zip(model.layers, plan.layers)):
        experts = list(layer.experts)
        pairs = []
        for pi, (i, j) in enumerate(lp.pairs):
            slots = {}
            for s in SLOTS:
                art = merge_experts(
                    layer.experts[i].slot(s), layer.experts[j].slot(s),
                    stats.get(li, i, s), stats.get(li, j, s), tau,
                )
                sim_entries += int(art.masks.m_sim.sum())
                total_entries += art.masks.m_sim.size
                slots[s] = pack_pair(art, (i, j), counter)
            pairs.append(PackedSlots((i, j), slots))
            experts[i], experts[j] = PackedRef(pi, 0), PackedRef(pi, 1)
        layers.append(MoELayer(layer.router, experts, pairs))
    info = {
        "sim_fraction": sim_entries / total_entries if total_entries else 0.0,
        "saturation_low": counter.low,
        "saturation_high": counter.high,
    }
    return ToyMoEModel(model.config, layers), info


def _replace_pairs(model: ToyMoEModel, plan: PairingPlan, combine) -> ToyMoEModel:
    _check_plan(model, plan)
    layers = []
    for layer, lp in zip(model.layers, plan.layers):
        experts = list(layer.experts)
        for i, j in lp.pairs:
            experts[i], experts[j] = combine(layer.experts[i], layer.experts[j])
        layers.append(MoELayer(layer.router, experts))
    return ToyMoEModel(model.config, layers)


def naive_average_model(model: ToyMoEModel, plan: PairingPlan) -> ToyMoEModel:
    """Baseline: both experts of a pair share the plain average of their weights."""

    def combine(a, b):
        avg = DenseExpert(*(round_to_bf16((a.slot(s) + b.slot(s)) / np.float32(2)) for s in SLOTS))
        return avg, avg

    return _replace_pairs(model, plan, combine)


def drop_model(model: ToyMoEModel, plan: PairingPlan) -> ToyMoEModel:
    """Baseline: the second expert of each pair is dropped; its tokens use the first."""
    return _replace_pairs(model, plan, lambda a, b: (a, a))


def run_compression(
    model: ToyMoEModel,
    ratio: float,
    tau: float = 0.4,
    seed: int = 0,
    grouping: str = "random",
    calib_tokens: int = 512,
    calib_seed: int = 0,
    search_budget: int = 64,
) -> tuple[ToyMoEModel, PairingPlan, CalibrationStats, dict]:
    """Calibrate, group, merge and pack; returns the model, plan, stats and a report."""
    cfg = model.config
    t0 = time.perf_counter()
    stats = collect_norms(model, gaussian_tokens(calib_tokens, cfg.d_model, calib_seed))
    if grouping == "random":
        plan = group_random(cfg.n_experts, ratio, seed, cfg.n_layers)
    elif grouping == "search":
        plan = group_search(cfg.n_experts, ratio, model_expert_sets(model), stats, tau, search_budget, seed)
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    compressed, info = compress_model(model, plan, stats, tau)
    wall_ms = (time.perf_counter() - t0) * 1e3
    before, after = model.expert_bytes(), compressed.expert_bytes()
    report = {
        "expert_bytes_before": before,
        "expert_bytes_after": after,
        "ratio_achieved": after / before,
        "expert_tensors_per_layer": compressed.n_expert_tensors(0),
        "wall_time_ms": wall_ms,
        "saturation_count": info["saturation_low"] + info["saturation_high"],
        "sim_fraction": info["sim_fraction"],
        "tau": tau,
        "ratio": ratio,
        "seed": seed,
        "grouping": grouping,
        "calib_tokens": calib_tokens,
        "calib_seed": calib_seed,
    }
    if plan.objective is not None:
        report["search_objective"] = plan.objective
    return compressed, plan, stats, report
