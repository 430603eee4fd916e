import numpy as np
import pytest

from moepack.calibration import collect_norms
from moepack.compress import gaussian_tokens
from moepack.errors import DimensionMismatch
from moepack.merge import build_masks
from moepack.toy_moe import DenseExpert, MoELayer, ToyMoEConfig, ToyMoEModel, generate_toy, silu


def single_expert_model():
    eye = np.eye(2, dtype=np.float32)
    cfg = ToyMoEConfig(1, 1, 1, 2, 2, 0)
    return ToyMoEModel(cfg, [MoELayer(np.float32([[1.0, 1.0]]), [DenseExpert(eye, eye, eye)])])


def test_example_norms():
    m = single_expert_model()
    xs = np.float32([[1, 0], [0, 2], [2, 0]])
    st = collect_norms(m, xs)
    np.testing.assert_allclose(st.get(0, 0, "w1"), [np.sqrt(5), 2.0], rtol=1e-12)
    np.testing.assert_array_equal(st.get(0, 0, "w1"), st.get(0, 0, "w3"))
    # identity gate/up: intermediate is silu(x) * x
    inter = (silu(xs) * xs).astype(np.float64)
    np.testing.assert_allclose(st.get(0, 0, "w2"), np.sqrt((inter**2).sum(axis=0)), rtol=1e-12)
    assert st.token_counts.tolist() == [[3]]


def test_single_token():
    st = collect_norms(single_expert_model(), np.float32([[3, 4]]))
    np.testing.assert_allclose(st.get(0, 0, "w1"), [3, 4])


def test_unrouted_expert_gets_ones():
    eye = np.eye(2, dtype=np.float32)
    cfg = ToyMoEConfig(1, 2, 1, 2, 2, 0)
    m = ToyMoEModel(cfg, [MoELayer(np.float32([[1, 0], [-1, 0]]), [DenseExpert(eye, eye, eye)] * 2)])
    st = collect_norms(m, np.float32([[1, 0], [2, 1]]))
    assert st.token_counts.tolist() == [[2, 0]]
    for s in ("w1", "w2", "w3"):
        np.testing.assert_array_equal(st.get(0, 1, s), np.ones(2))


def test_counts_sum_to_tokens_times_topk():
    m = generate_toy(ToyMoEConfig(n_layers=3, top_k=2))
    st = collect_norms(m, gaussian_tokens(100, 64, 0))
    assert st.token_counts.sum(axis=1).tolist() == [200, 200, 200]
    for (li, e, s), v in st.norms.items():
        assert np.all(v >= 0)
        assert v.shape == ((128,) if s == "w2" else (64,))


def test_permutation_equivariant(rng):
    m = generate_toy(ToyMoEConfig(n_layers=2))
    xs = gaussian_tokens(64, 64, 3)
    a = collect_norms(m, xs)
    b = collect_norms(m, xs[rng.permutation(64)])
    for k in a.norms:
        np.testing.assert_allclose(a.norms[k], b.norms[k], rtol=1e-12)


def test_deterministic():
    m = generate_toy(ToyMoEConfig(n_layers=2))
    xs = gaussian_tokens(64, 64, 3)
    a, b = collect_norms(m, xs), collect_norms(m, xs)
    assert all(np.array_equal(a.norms[k], b.norms[k]) for k in a.norms)


def test_input_scaling_keeps_saliency_masks():
    # first-layer gate/up inputs are the raw tokens, so their norms scale exactly
    m = generate_toy(ToyMoEConfig(n_layers=1))
    xs = gaussian_tokens(128, 64, 4)
    a = collect_norms(m, xs)
    b = collect_norms(m, xs * np.float32(4.0))
    for e in range(8):
        np.testing.assert_allclose(b.get(0, e, "w1"), 4 * a.get(0, e, "w1"), rtol=1e-12)
    w0, w1 = m.expert_weight(0, 0, "w1"), m.expert_weight(0, 1, "w1")
    ma = build_masks(w0, w1, a.get(0, 0, "w1"), a.get(0, 1, "w1"), 0.4)
    mb = build_masks(w0, w1, b.get(0, 0, "w1"), b.get(0, 1, "w1"), 0.4)
    np.testing.assert_array_equal(ma.m_sal_i, mb.m_sal_i)


def test_dimension_checked():
    with pytest.raises(DimensionMismatch):
        collect_norms(single_expert_model(), np.zeros((2, 3)))
    with pytest.raises(DimensionMismatch):
        collect_norms(single_expert_model(), np.zeros((0, 2)))
