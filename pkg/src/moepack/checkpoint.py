"""Saving and loading toy models, calibration stats and quantized tensors."""

from __future__ import annotations

import dataclasses

import numpy as np

from .bitcodec import PackedExpertPair, bf16_to_f32, f32_to_bf16
from .calibration import CalibrationStats
from .container import Container
from .grouping import PairingPlan
from .quantization import dequantize_group, quantize_group
from .toy_moe import SLOTS, DenseExpert, MoELayer, PackedRef, PackedSlots, ToyMoEConfig, ToyMoEModel


def model_to_container(
    model: ToyMoEModel,
    metadata: dict | None = None,
    plan: PairingPlan | None = None,
    stats: CalibrationStats | None = None,
) -> Container:
    c = Container(metadata={"config": dataclasses.asdict(model.config), **(metadata or {})})
    pair_experts = {}
    for li, layer in enumerate(model.layers):
        c.add(f"layer{li}/router", "f32", layer.router.astype(np.float32))
        for e, ex in enumerate(layer.experts):
            if isinstance(ex, DenseExpert):
                for s in SLOTS:
                    c.add(f"layer{li}/expert{e}/{s}", "bf16", f32_to_bf16(ex.slot(s)))
        for pi, pair in enumerate(layer.pairs):
            pair_experts[f"layer{li}/pair{pi}"] = list(pair.experts)
            for s in SLOTS:
                c.add(f"layer{li}/pair{pi}/{s}", "pbf16", pair.slots[s].words)
    if pair_experts:
        c.metadata["pairs"] = pair_experts
    if plan is not None:
        c.metadata["pairing_plan"] = plan.to_json()
    if stats is not None:
        for (li, e, s), v in sorted(stats.norms.items()):
            c.add(f"calib/{li}/{e}/{s}", "f32", np.asarray(v, dtype=np.float32))
    return c


def model_from_container(c: Container) -> ToyMoEModel:
    try:
        cfg = ToyMoEConfig(**c.metadata["config"])
    except (KeyError, TypeError) as exc:
        raise ValueError("container has no valid model config") from exc
    pairs_meta = c.metadata.get("pairs", {})
    layers = []
    for li in range(cfg.n_layers):
        experts: list = [None] * cfg.n_experts
        pairs = []
        pi = 0
        while f"layer{li}/pair{pi}/w1" in c:
            i, j = pairs_meta[f"layer{li}/pair{pi}"]
            slots = {s: PackedExpertPair(np.asarray(c[f"layer{li}/pair{pi}/{s}"]), (i, j)) for s in SLOTS}
            pairs.append(PackedSlots((i, j), slots))
            experts[i], experts[j] = PackedRef(pi, 0), PackedRef(pi, 1)
            pi += 1
        for e in range(cfg.n_experts):
            if experts[e] is None:
                experts[e] = DenseExpert(*(bf16_to_f32(c[f"layer{li}/expert{e}/{s}"]) for s in SLOTS))
        layers.append(MoELayer(np.asarray(c[f"layer{li}/router"], dtype=np.float32), experts, pairs))
    return ToyMoEModel(cfg, layers)


def stats_from_container(c: Container) -> CalibrationStats | None:
    norms = {}
    for name in c.tensors:
        if name.startswith("calib/"):
            _, li, e, s = name.split("/")
            norms[(int(li), int(e), s)] = np.asarray(c[name], dtype=np.float64)
    if not norms:
        return None
    n_layers = 1 + max(k[0] for k in norms)
    n_experts = 1 + max(k[1] for k in norms)
    return CalibrationStats(norms, np.zeros((n_layers, n_experts), dtype=np.int64))


def add_quantized(c: Container, name: str, w_merged, bits: int, group_size: int) -> None:
    codes, scales = quantize_group(w_merged, bits, group_size)
    c.add(name, f"q{bits}g{group_size}", codes)
    c.add(f"{name}/scales", "f32", scales)


def read_quantized(c: Container, name: str) -> np.ndarray:
    dtype = c.tensors[name].dtype
    group = int(dtype.split("g")[1])
    return dequantize_group(c[name], c[f"{name}/scales"], group)
