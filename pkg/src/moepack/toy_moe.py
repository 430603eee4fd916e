"""A small Mixtral-shaped MoE used as the compression test bed.

Each layer has a linear top-k router and ``n_experts`` SwiGLU experts with
gate ``w1`` (d_ff x d_model), up ``w3`` (d_ff x d_model) and down ``w2``
(d_model x d_ff).  Layers are chained with residual connections; there is no
attention or embedding.  Expert weights live on the bfloat16 grid and are
either dense or a reference into a packed pair.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .bitcodec import EXP_BIAS, EXP_MIN, PackedExpertPair, round_to_bf16, unpack_pair
from .errors import ConfigMismatch, DimensionMismatch
from .kernel import gemv_fused, gemv_reference

SLOTS = ("w1", "w2", "w3")

# smallest magnitude the packed format represents without rounding up
MIN_PACKABLE = np.float32(2.0 ** (EXP_MIN - EXP_BIAS))


@dataclass(frozen=True)
class ToyMoEConfig:
    n_layers: int = 4
    n_experts: int = 8
    top_k: int = 2
    d_model: int = 64
    d_ff: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_experts", "top_k", "d_model", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def slot_shape(self, slot: str) -> tuple[int, int]:
        if slot == "w2":
            return (self.d_model, self.d_ff)
        return (self.d_ff, self.d_model)

    def same_shape(self, other: "ToyMoEConfig") -> bool:
        return (self.n_layers, self.n_experts, self.top_k, self.d_model, self.d_ff) == (
            other.n_layers, other.n_experts, other.top_k, other.d_model, other.d_ff
        )


@dataclass
class DenseExpert:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray

    def slot(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass(frozen=True)
class PackedRef:
    pair: int
    pos: int


@dataclass
class PackedSlots:
    """One merged expert pair: a packed matrix per linear slot."""

    experts: tuple[int, int]
    slots: dict[str, PackedExpertPair]


@dataclass
class MoELayer:
    router: np.ndarray
    experts: list[Union[DenseExpert, PackedRef]]
    pairs: list[PackedSlots] = field(default_factory=list)


@dataclass
class ToyMoEModel:
    config: ToyMoEConfig
    layers: list[MoELayer]

    def copy(self) -> "ToyMoEModel":
        return copy.deepcopy(self)

    def is_packed(self, layer: int, expert: int) -> bool:
        return isinstance(self.layers[layer].experts[expert], PackedRef)

    def expert_weight(self, layer: int, expert: int, slot: str) -> np.ndarray:
        """Dense float32 weights of one slot, decoding packed experts."""
        e = self.layers[layer].experts[expert]
        if isinstance(e, PackedRef):
            return unpack_pair(self.layers[layer].pairs[e.pair].slots[slot], e.pos)
        return e.slot(slot)

    def apply_slot(self, layer: int, expert: int, slot: str, xs: np.ndarray) -> np.ndarray:
        e = self.layers[layer].experts[expert]
        if isinstance(e, PackedRef):
            return gemv_fused(self.layers[layer].pairs[e.pair].slots[slot], e.pos, xs)
        return gemv_reference(e.slot(slot), xs)

    def expert_bytes(self) -> int:
        """Expert weight storage in bytes: 2 per bf16 or pbf16 element."""
        total = 0
        for layer in self.layers:
            for e in layer.experts:
                if isinstance(e, DenseExpert):
                    total += 2 * sum(e.slot(s).size for s in SLOTS)
            for pair in layer.pairs:
                total += sum(p.nbytes for p in pair.slots.values())
        return total

    def n_expert_tensors(self, layer: int = 0) -> int:
        """Distinct expert weight sets stored in a layer."""
        lyr = self.layers[layer]
        return sum(isinstance(e, DenseExpert) for e in lyr.experts) + len(lyr.pairs)

    def unpacked(self) -> "ToyMoEModel":
        """Same model with every packed expert materialized as dense weights."""
        out = ToyMoEModel(self.config, [])
        for li, layer in enumerate(self.layers):
            experts = [
                DenseExpert(*(self.expert_weight(li, e, s) for s in SLOTS))
                for e in range(len(layer.experts))
            ]
            out.layers.append(MoELayer(layer.router.copy(), experts))
        return out


def to_toy_weights(w: np.ndarray) -> np.ndarray:
    """Round onto the bf16 grid and lift tiny magnitudes to 2**-15."""
    w = round_to_bf16(w)
    small = np.abs(w) < MIN_PACKABLE
    return np.where(small, np.copysign(MIN_PACKABLE, w), w).astype(np.float32)


def generate_toy(config: ToyMoEConfig, duplicate_pairs: bool = False, noise: float = 0.0) -> ToyMoEModel:
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(config.seed)
    std_in = 1.0 / np.sqrt(config.d_model)
    std_ff = 1.0 / np.sqrt(config.d_ff)
    stds = {"w1": std_in, "w2": std_ff, "w3": std_in}

    def gauss(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    layers = []
    for _ in range(config.n_layers):
        router = gauss((config.n_experts, config.d_model), std_in)
        raw: list[dict[str, np.ndarray]] = []
        for e in range(config.n_experts):
            if duplicate_pairs and e % 2 == 1:
                base = raw[e - 1]
                raw.append({
                    s: (base[s] + gauss(base[s].shape, noise * stds[s])).astype(np.float32) for s in SLOTS
                })
            else:
                raw.append({s: gauss(config.slot_shape(s), stds[s]) for s in SLOTS})
        experts = [DenseExpert(*(to_toy_weights(w[s]) for s in SLOTS)) for w in raw]
        layers.append(MoELayer(router, experts))
    return ToyMoEModel(config, layers)


def route(router: np.ndarray, xs: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k expert indices and renormalized softmax weights per token.

    Ties in the logits go to the lower expert index.
    """
    logits = gemv_reference(router, xs)
    idx = np.argsort(-logits, axis=1, kind="stable")[:, :top_k]
    top = np.take_along_axis(logits, idx, axis=1)
    e = np.exp(top - top[:, :1])
    return idx, (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def silu(a: np.ndarray) -> np.ndarray:
    return (a / (np.float32(1) + np.exp(-a))).astype(np.float32)


Observer = Callable[[int, int, np.ndarray, np.ndarray], None]


def forward(
    model: ToyMoEModel,
    x,
    observer: Observer | None = None,
    routing_log: list | None = None,
) -> np.ndarray:
    """Run tokens ``x`` (T x d_model) through every layer.

    ``observer(layer, expert, expert_inputs, intermediate)`` sees what each
    expert receives; ``routing_log`` collects the selected indices per layer.
    """
    cfg = model.config
    h = np.asarray(x, dtype=np.float32)
    if h.ndim != 2 or h.shape[1] != cfg.d_model:
        raise DimensionMismatch(f"expected input of shape (T, {cfg.d_model}), got {h.shape}")
    for li, layer in enumerate(model.layers):
        idx, weights = route(layer.router, h, cfg.top_k)
        if routing_log is not None:
            routing_log.append(idx)
        moe = np.zeros_like(h)
        for e in range(cfg.n_experts):
            tok, rank = np.nonzero(idx == e)
            if tok.size == 0:
                continue
            xe = np.ascontiguousarray(h[tok])
            inter = silu(model.apply_slot(li, e, "w1", xe)) * model.apply_slot(li, e, "w3", xe)
            if observer is not None:
                observer(li, e, xe, inter)
            out = model.apply_slot(li, e, "w2", inter)
            moe[tok] += weights[tok, rank][:, None] * out
        h = h + moe
    return h


def eval_deviation(original: ToyMoEModel, compressed: ToyMoEModel, inputs) -> dict:
    """Per-token relative L2 deviation of the compressed model's outputs."""
    if not original.config.same_shape(compressed.config):
        raise ConfigMismatch("models have different configurations")
    y_o = forward(original, inputs).astype(np.float64)
    y_c = forward(compressed, inputs).astype(np.float64)
    rel = np.linalg.norm(y_c - y_o, axis=1) / (np.linalg.norm(y_o, axis=1) + 1e-12)
    return {"mean_rel_l2": float(rel.mean()), "max_rel_l2": float(rel.max())}
