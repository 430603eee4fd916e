"""Per-expert input activation norms gathered from a routed forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .toy_moe import SLOTS, ToyMoEModel, forward


@dataclass
class CalibrationStats:
    """L2 norm per input feature, keyed by (layer, expert, slot).

    ``token_counts[layer, expert]`` is the number of tokens routed to the
    expert.  Unrouted experts carry all-ones norms.
    """

    norms: dict[tuple[int, int, str], np.ndarray]
    token_counts: np.ndarray

    def get(self, layer: int, expert: int, slot: str) -> np.ndarray:
        return self.norms[(layer, expert, slot)]


def collect_norms(model: ToyMoEModel, inputs) -> CalibrationStats:
    cfg = model.config
    xs = np.asarray(inputs, dtype=np.float32)
    if xs.ndim != 2 or xs.shape[0] < 1 or xs.shape[1] != cfg.d_model:
        raise DimensionMismatch(f"calibration inputs must be (T>=1, {cfg.d_model}), got {xs.shape}")

    sq_in = np.zeros((cfg.n_layers, cfg.n_experts, cfg.d_model))
    sq_ff = np.zeros((cfg.n_layers, cfg.n_experts, cfg.d_ff))
    counts = np.zeros((cfg.n_layers, cfg.n_experts), dtype=np.int64)

    def observe(layer, expert, x_rows, inter):
        x64 = x_rows.astype(np.float64)
        h64 = inter.astype(np.float64)
        sq_in[layer, expert] += np.einsum("tc,tc->c", x64, x64)
        sq_ff[layer, expert] += np.einsum("tc,tc->c", h64, h64)
        counts[layer, expert] += x_rows.shape[0]

    forward(model, xs, observer=observe)

    norms = {}
    for li in range(cfg.n_layers):
        for e in range(cfg.n_experts):
            if counts[li, e] == 0:
                n_in, n_ff = np.ones(cfg.d_model), np.ones(cfg.d_ff)
            else:
                n_in, n_ff = np.sqrt(sq_in[li, e]), np.sqrt(sq_ff[li, e])
            # gate and up read the expert input; down reads the intermediate
            norms[(li, e, "w1")] = n_in
            norms[(li, e, "w3")] = n_in
            norms[(li, e, "w2")] = n_ff
    assert set(s for _, _, s in norms) == set(SLOTS)
    return CalibrationStats(norms, counts)
