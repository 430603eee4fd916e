import math

import numpy as np
import pytest

from moepack.bitcodec import bf16_to_f32, f32_to_bf16, pack_pair
from moepack.compress import gaussian_tokens
from moepack.errors import ConfigMismatch, DimensionMismatch
from moepack.merge import merge_experts
from moepack.toy_moe import (
    MIN_PACKABLE,
    SLOTS,
    DenseExpert,
    MoELayer,
    PackedRef,
    PackedSlots,
    ToyMoEConfig,
    ToyMoEModel,
    eval_deviation,
    forward,
    generate_toy,
    route,
)
from moepack.analysis import pearson_pairwise


def hand_model(router, w1, w3, w2, top_k=1):
    experts = [DenseExpert(np.float32(a), np.float32(c), np.float32(b)) for a, b, c in zip(w1, w3, w2)]
    cfg = ToyMoEConfig(1, len(experts), top_k, len(w1[0][0]), len(w1[0]), 0)
    return ToyMoEModel(cfg, [MoELayer(np.float32(router), experts)])


def silu(a):
    return a / (1 + math.exp(-a))


class TestConfig:
    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            ToyMoEConfig(n_experts=0)
        with pytest.raises(ValueError):
            ToyMoEConfig(n_experts=2, top_k=3)


class TestGenerate:
    def test_deterministic(self):
        a = generate_toy(ToyMoEConfig(seed=3))
        b = generate_toy(ToyMoEConfig(seed=3))
        for li in range(4):
            assert np.array_equal(a.layers[li].router, b.layers[li].router)
            for e in range(8):
                for s in SLOTS:
                    assert np.array_equal(a.expert_weight(li, e, s), b.expert_weight(li, e, s))

    def test_weights_on_bf16_grid_and_packable(self):
        m = generate_toy(ToyMoEConfig(n_layers=1))
        w = m.expert_weight(0, 3, "w2")
        assert np.array_equal(bf16_to_f32(f32_to_bf16(w)), w)
        assert np.abs(w).min() >= MIN_PACKABLE

    def test_exact_duplicates(self):
        m = generate_toy(ToyMoEConfig(n_layers=2), duplicate_pairs=True, noise=0.0)
        for li in range(2):
            for k in range(4):
                for s in SLOTS:
                    assert np.array_equal(m.expert_weight(li, 2 * k, s), m.expert_weight(li, 2 * k + 1, s))

    def test_noisy_duplicates_correlated(self):
        m = generate_toy(ToyMoEConfig(n_layers=1), duplicate_pairs=True, noise=0.1)
        for k in range(4):
            for s in SLOTS:
                assert pearson_pairwise(m.expert_weight(0, 2 * k, s), m.expert_weight(0, 2 * k + 1, s)) > 0.9

    def test_init_scale(self):
        m = generate_toy(ToyMoEConfig(n_layers=1, d_model=64, d_ff=256))
        assert np.std(m.expert_weight(0, 0, "w1")) == pytest.approx(1 / 8, rel=0.05)
        assert np.std(m.expert_weight(0, 0, "w2")) == pytest.approx(1 / 16, rel=0.05)


class TestForward:
    def test_single_expert_routing_weight_one(self):
        m = generate_toy(ToyMoEConfig(n_layers=1, n_experts=1, top_k=1, d_model=4, d_ff=6))
        x = gaussian_tokens(5, 4, 0)
        idx, w = route(m.layers[0].router, x, 1)
        assert np.all(idx == 0) and np.all(w == 1.0)

    def test_hand_computed(self):
        m = hand_model(
            router=[[1.0, 0.0]],
            w1=[[[1.0, 0.0], [0.0, 1.0]]],
            w3=[[[1.0, 1.0], [0.0, 2.0]]],
            w2=[[[1.0, 0.0], [0.0, 0.5]]],
        )
        y = forward(m, np.float32([[1.0, 2.0]]))
        h = [silu(1.0) * 3.0, silu(2.0) * 4.0]
        expected = [1.0 + h[0], 2.0 + 0.5 * h[1]]
        np.testing.assert_allclose(y[0], expected, rtol=1e-6)

    def test_hand_computed_two_experts(self):
        eye = [[1.0, 0.0], [0.0, 1.0]]
        m = hand_model(
            router=[[1.0, 0.0], [0.0, 1.0]],
            w1=[eye, eye], w3=[eye, eye],
            w2=[eye, [[2.0, 0.0], [0.0, 2.0]]],
            top_k=2,
        )
        x = [0.5, 1.5]
        y = forward(m, np.float32([x]))
        g1 = math.exp(0.5) / (math.exp(0.5) + math.exp(1.5))
        g2 = 1 - g1
        f = [silu(v) * v for v in x]
        expected = [x[i] + g1 * f[i] + g2 * 2 * f[i] for i in range(2)]
        np.testing.assert_allclose(y[0], expected, rtol=1e-6)

    def test_width_checked(self):
        m = generate_toy(ToyMoEConfig(n_layers=1, d_model=4, d_ff=4))
        with pytest.raises(DimensionMismatch):
            forward(m, np.zeros((2, 5)))

    def test_packed_self_merge_is_bit_identical(self):
        cfg = ToyMoEConfig(n_layers=1, n_experts=4, top_k=1, d_model=16, d_ff=32)
        m = generate_toy(cfg, duplicate_pairs=True, noise=0.0)
        packed = m.copy()
        layer = packed.layers[0]
        slots = {}
        for s in SLOTS:
            w = m.expert_weight(0, 1, s)
            slots[s] = pack_pair(merge_experts(w, w, np.ones(w.shape[1]), np.ones(w.shape[1]), 0.4), (1, 1))
        layer.pairs.append(PackedSlots((1, 1), slots))
        layer.experts[1] = PackedRef(0, 0)
        x = gaussian_tokens(64, 16, 5)
        assert np.array_equal(forward(m, x), forward(packed, x))

    def test_deterministic(self):
        m = generate_toy(ToyMoEConfig(n_layers=2))
        x = gaussian_tokens(32, 64, 1)
        assert np.array_equal(forward(m, x), forward(m, x))


class TestEvalDeviation:
    def test_identical(self):
        m = generate_toy(ToyMoEConfig(n_layers=2))
        r = eval_deviation(m, m.copy(), gaussian_tokens(16, 64, 2))
        assert r == {"mean_rel_l2": 0.0, "max_rel_l2": 0.0}

    def test_config_mismatch(self):
        a = generate_toy(ToyMoEConfig(n_layers=1))
        b = generate_toy(ToyMoEConfig(n_layers=2))
        with pytest.raises(ConfigMismatch):
            eval_deviation(a, b, gaussian_tokens(4, 64, 0))

    def test_hand_value(self):
        a = hand_model([[1.0, 0.0]], [[[1.0, 0.0], [0.0, 1.0]]], [[[1.0, 0.0], [0.0, 1.0]]], [[[1.0, 0.0], [0.0, 1.0]]])
        b = hand_model([[1.0, 0.0]], [[[1.0, 0.0], [0.0, 1.0]]], [[[1.0, 0.0], [0.0, 1.0]]], [[[0.0, 0.0], [0.0, 0.0]]])
        x = np.float32([[1.0, 1.0]])
        y = 1 + silu(1.0)
        r = eval_deviation(a, b, x)
        assert r["mean_rel_l2"] == pytest.approx(silu(1.0) / y, rel=1e-6)
