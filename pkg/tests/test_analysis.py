import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from moepack.analysis import (
    exponent_histogram,
    measured_similarity_fraction,
    pearson_pairwise,
    similarity_fraction_closed,
    similarity_fraction_mc,
)
from moepack.errors import DegenerateVariance, DomainError, ShapeMismatch
from moepack.toy_moe import ToyMoEConfig, generate_toy


def quadrature_oracle(rho, tau):
    """P(similar) by integrating the half-normal joint density directly.

    P = int_0^inf f_B(b) [F_A(b*hi) - F_A(b*lo)] db with sigma_A = 1,
    sigma_B = rho; no use of the arctan form.
    """
    hi, lo = (1 + tau) / (1 - tau), (1 - tau) / (1 + tau)
    f_b = lambda b: math.sqrt(2 / math.pi) / rho * math.exp(-b * b / (2 * rho * rho))
    cdf_a = lambda x: math.erf(x / math.sqrt(2))
    return quad(lambda b: f_b(b) * (cdf_a(b * hi) - cdf_a(b * lo)), 0, math.inf, epsabs=1e-14, epsrel=1e-13)[0]


# frozen from quadrature_oracle
CLOSED_1_04 = 0.4844757663633736
CLOSED_2_04 = 0.4144883141998159


class TestExponentHistogram:
    def test_ones(self):
        h = exponent_histogram(np.ones((3, 3)))
        assert h["counts"][127] == 9 and h["counts"].sum() == 9
        assert h["fraction_in_range"] == 1.0

    def test_powers_of_two(self):
        h = exponent_histogram([0.5, 1.0, 2.0])
        assert h["counts"][126] == h["counts"][127] == h["counts"][128] == 1

    def test_out_of_range(self):
        h = exponent_histogram([1.0, 2.0**-20, 0.0, 2.0**20])
        assert h["fraction_in_range"] == 0.25

    def test_small_gaussian(self, rng):
        w = rng.normal(0, 0.02, (256, 256)).astype(np.float32)
        assert exponent_histogram(w)["fraction_in_range"] > 0.99


class TestPearson:
    def test_self_and_negation(self, rng):
        w = rng.standard_normal((16, 16))
        assert pearson_pairwise(w, w) == pytest.approx(1.0, abs=1e-12)
        assert pearson_pairwise(w, -w) == pytest.approx(-1.0, abs=1e-12)

    def test_independent(self, rng):
        a, b = rng.standard_normal((2, 256, 256))
        assert abs(pearson_pairwise(a, b)) < 0.02

    def test_matches_numpy(self, rng):
        a, b = rng.standard_normal((2, 40))
        assert pearson_pairwise(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)

    def test_errors(self):
        with pytest.raises(DegenerateVariance):
            pearson_pairwise(np.ones(4), np.arange(4))
        with pytest.raises(DegenerateVariance):
            pearson_pairwise([1.0], [2.0])
        with pytest.raises(ShapeMismatch):
            pearson_pairwise(np.ones(3), np.ones(4))

    def test_toy_duplicates(self):
        m = generate_toy(ToyMoEConfig(n_layers=1), duplicate_pairs=True)
        assert pearson_pairwise(m.expert_weight(0, 0, "w1"), m.expert_weight(0, 1, "w1")) == pytest.approx(1.0)


class TestClosedForm:
    def test_zero_threshold(self):
        assert similarity_fraction_closed(1.0, 0.0) == 0.0

    def test_frozen_values(self):
        assert similarity_fraction_closed(1.0, 0.4) == pytest.approx(CLOSED_1_04, abs=1e-12)
        assert similarity_fraction_closed(2.0, 0.4) == pytest.approx(CLOSED_2_04, abs=1e-12)
        assert similarity_fraction_closed(1.0, 0.4) == pytest.approx(0.48449, abs=1e-4)

    @pytest.mark.parametrize("rho", [0.25, 0.5, 1.0, 2.0, 3.0])
    @pytest.mark.parametrize("tau", [0.05, 0.1, 0.4, 0.7, 0.95])
    def test_against_quadrature(self, rho, tau):
        assert similarity_fraction_closed(rho, tau) == pytest.approx(quadrature_oracle(rho, tau), abs=1e-10)

    @given(st.floats(1e-3, 1e3), st.floats(0, 0.999))
    def test_symmetric_in_rho(self, rho, tau):
        assert abs(similarity_fraction_closed(rho, tau) - similarity_fraction_closed(1 / rho, tau)) < 1e-12

    @given(st.floats(1e-2, 1e2), st.floats(0, 0.99), st.floats(0, 0.99))
    def test_monotone_in_tau(self, rho, t1, t2):
        lo, hi = sorted((t1, t2))
        assert similarity_fraction_closed(rho, lo) <= similarity_fraction_closed(rho, hi) + 1e-15

    def test_limit_toward_one(self):
        assert similarity_fraction_closed(1.0, 0.999999) > 0.999

    @pytest.mark.parametrize("rho,tau", [(0.0, 0.4), (-1.0, 0.4), (1.0, 1.0), (1.0, -0.1)])
    def test_domain(self, rho, tau):
        with pytest.raises(DomainError):
            similarity_fraction_closed(rho, tau)


class TestMonteCarlo:
    def test_zero_threshold(self):
        assert similarity_fraction_mc(1, 1, 0.0, 10_000, 0) == 0.0

    def test_matches_closed(self):
        p = similarity_fraction_mc(1, 1, 0.4, 1_000_000, 3)
        assert abs(p - CLOSED_1_04) < 0.003

    def test_near_one(self):
        assert similarity_fraction_mc(1, 1, 0.99, 1_000_000, 1) > 0.98

    def test_deterministic_and_sharding(self):
        assert similarity_fraction_mc(1, 2, 0.3, 1001, 9) == similarity_fraction_mc(1, 2, 0.3, 1001, 9)
        assert similarity_fraction_mc(1, 1, 0.3, 5, 0, n_shards=16) in {k / 5 for k in range(6)}


class TestMeasured:
    def test_identical(self, rng):
        w = rng.standard_normal((8, 8))
        assert measured_similarity_fraction(w, w, 0.0) == 1.0

    def test_independent_matches_theory(self, rng):
        a, b = rng.standard_normal((2, 1000, 1000)).astype(np.float32)
        assert abs(measured_similarity_fraction(a, b, 0.4) - CLOSED_1_04) < 0.01

    def test_correlated_exceeds_theory(self, rng):
        a = rng.standard_normal((300, 300)).astype(np.float32)
        b = a + 0.3 * rng.standard_normal((300, 300)).astype(np.float32)
        assert measured_similarity_fraction(a, b, 0.4) > similarity_fraction_closed(1.0, 0.4)

    def test_monotone(self, rng):
        a, b = rng.standard_normal((2, 50, 50))
        fr = [measured_similarity_fraction(a, b, t) for t in np.linspace(0, 1, 11)]
        assert fr == sorted(fr)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            measured_similarity_fraction(np.ones(2), np.ones(3), 0.4)
