import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crpslam.errors import EstimatorError
from crpslam.rng import Stream
from crpslam.scoring import (
    GaussianForecast,
    SkillWarning,
    crps_biased,
    crps_fair,
    crps_fair_gradient,
    crps_gaussian,
    ensemble_mean_rmse,
    mean_spread,
    rmse,
    ssr,
)
from crpslam.selftest import crps_unbiasedness, propriety_scan

members_st = st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=12)


def brute_fair(m, x):
    n = len(m)
    skill = sum(abs(a - x) for a in m) / n
    spread = sum(abs(a - b) for a in m for b in m)
    return skill - spread / (2 * n * (n - 1))


def test_fair_hand_values():
    assert crps_fair([1, 1, 1], 1) == 0
    assert crps_fair([0, 1], 2) == pytest.approx(1.0, abs=1e-15)
    assert crps_fair([0, 2], 1) == pytest.approx(0.0, abs=1e-15)


def test_fair_needs_two_members():
    with pytest.raises(EstimatorError):
        crps_fair([0.3], 0.0)
    with pytest.raises(EstimatorError):
        crps_fair_gradient([0.3], 0.0)


def test_biased_hand_values():
    assert crps_biased([2.5], 1.0) == 1.5
    assert crps_biased([0, 1], 2) == pytest.approx(1.25, abs=1e-15)
    assert crps_biased([0, 2], 1) == pytest.approx(0.5, abs=1e-15)


def test_gaussian_closed_form_values():
    assert crps_gaussian(GaussianForecast(0.0, 1.0), 0.0) == pytest.approx(0.233695, abs=5e-7)
    assert crps_gaussian(GaussianForecast(0.0, 1.0), 0.5) == pytest.approx(0.331404, abs=5e-7)
    # z = 0: sigma * (2 phi(0) - 1/sqrt(pi)) written out independently
    assert crps_gaussian((0.0, 1.0), 0.0) == pytest.approx(2 / math.sqrt(2 * math.pi) - 1 / math.sqrt(math.pi), abs=1e-12)


def test_gaussian_rejects_bad_sigma():
    with pytest.raises(ValueError):
        GaussianForecast(0.0, 0.0)
    with pytest.raises(ValueError):
        crps_gaussian((1.0, -2.0), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 10), st.floats(-3, 3))
def test_gaussian_affine_equivariance(mu, sigma, z):
    lhs = crps_gaussian((mu, sigma), mu + sigma * z)
    assert lhs == pytest.approx(sigma * crps_gaussian((0.0, 1.0), z), rel=1e-9, abs=1e-12)


def test_gaussian_matches_numerical_integral():
    """Oracle: integrate (F(y) - 1{y >= x})^2 dy on a fine grid."""
    x = 0.7
    trap = getattr(np, "trapezoid", None) or np.trapz
    cdf = np.vectorize(lambda v: 0.5 * (1 + math.erf(v / math.sqrt(2))))
    below = np.linspace(-12, x, 200_001)
    above = np.linspace(x, 12, 200_001)
    integral = trap(cdf(below) ** 2, below) + trap((cdf(above) - 1) ** 2, above)
    assert crps_gaussian((0.0, 1.0), x) == pytest.approx(integral, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(members_st, st.floats(-50, 50))
def test_fair_matches_brute_force(m, x):
    assert crps_fair(m, x) == pytest.approx(brute_fair(m, x), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(members_st, st.floats(-50, 50))
def test_fair_and_biased_differ_by_spread_rescaling(m, x):
    n = len(m)
    spread = sum(abs(a - b) for a in m for b in m)
    diff = crps_biased(m, x) - crps_fair(m, x)
    assert diff == pytest.approx(spread / (2 * n * (n - 1)) - spread / (2 * n * n), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(members_st, st.floats(-50, 50), st.floats(-100, 100))
def test_fair_translation_invariance(m, x, c):
    a = crps_fair(m, x)
    b = crps_fair([v + c for v in m], x + c)
    assert b == pytest.approx(a, abs=1e-9 * (1 + abs(c)) * 100)


def test_fair_translation_invariance_float32():
    s = Stream(3)
    m = s.normal(8).astype(np.float32)
    shifted = (m + np.float32(3.25)).astype(np.float32)
    assert abs(crps_fair(shifted, np.float32(0.4) + np.float32(3.25)) - crps_fair(m, np.float32(0.4))) < 1e-6


@settings(max_examples=100, deadline=None)
@given(members_st, st.floats(-50, 50), st.floats(0.01, 100))
def test_fair_positive_homogeneity(m, x, c):
    assert crps_fair([c * v for v in m], c * x) == pytest.approx(c * crps_fair(m, x), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(members_st, st.floats(-50, 50))
def test_fair_lower_bound(m, x):
    spread = max(m) - min(m)
    assert crps_fair(m, x) >= -1e-9 * (1 + spread)


def test_fair_can_be_exactly_zero_for_spread_ensemble():
    assert crps_fair([-1.0, 1.0], 0.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(members_st, st.floats(-50, 50), st.permutations(range(12)))
def test_member_permutation_invariance(m, x, perm):
    order = [p for p in perm if p < len(m)]
    assert crps_fair([m[i] for i in order], x) == pytest.approx(crps_fair(m, x), abs=1e-9)


def test_vectorised_over_grid():
    s = Stream(11)
    m = s.normal(5 * 3 * 4).reshape(5, 3, 4)
    obs = s.normal(12).reshape(3, 4)
    out = crps_fair(m, obs)
    assert out.shape == (3, 4)
    assert out[1, 2] == pytest.approx(brute_fair(list(m[:, 1, 2]), obs[1, 2]), abs=1e-12)


def test_fair_gradient_hand_example():
    # members {0, 1}, obs 2: skill part -1/2 each, spread part +1/2 / -1/2
    np.testing.assert_allclose(crps_fair_gradient([0.0, 1.0], 2.0), [0.0, -1.0])


def test_fair_gradient_all_ties_zero():
    np.testing.assert_array_equal(crps_fair_gradient([1.0, 1.0, 1.0], 1.0), [0, 0, 0])


def test_fair_gradient_symmetric_sums_to_zero():
    g = crps_fair_gradient([-0.7, 0.7], 0.0)
    assert g.sum() == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 8))
def test_fair_gradient_matches_finite_differences(seed, n):
    s = Stream(seed, lanes=8)
    m = s.normal(n)
    x = float(s.normal(1)[0])
    h = 1e-4
    d = np.abs(m[:, None] - m[None, :]) + np.eye(n)
    if d.min() < 4 * h or np.abs(m - x).min() < 4 * h:
        return  # too close to a tie
    g = crps_fair_gradient(m, x)
    for k in range(n):
        up, dn = m.copy(), m.copy()
        up[k] += h
        dn[k] -= h
        num = (crps_fair(up, x) - crps_fair(dn, x)) / (2 * h)
        assert abs(num - g[k]) < 1e-5


# rmse / ssr --------------------------------------------------------------------------


def test_rmse_examples():
    assert rmse(np.zeros((3, 3))) == 0
    assert rmse(np.full(7, 2.5)) == pytest.approx(2.5)
    assert rmse([0.0, 2.0]) == pytest.approx(math.sqrt(2))
    with pytest.raises(Exception):
        rmse([])


def test_ensemble_mean_rmse_perfect():
    truth = np.arange(6.0)
    assert ensemble_mean_rmse(np.stack([truth, truth]), truth) == 0


def test_ssr_identical_members_zero():
    truth = np.zeros(10)
    m = np.ones((4, 10))
    assert ssr(m, truth) == 0


def test_ssr_hand_two_members():
    # members truth +- 1: variance (ddof 1) = 2, mean error 0 -> infinite;
    # shift the pair so the mean error is 0.5 everywhere
    truth = np.zeros(6)
    m = np.stack([truth + 1.5, truth - 0.5])
    expected = math.sqrt((3 / 2) * 2.0 / 0.25)
    assert ssr(m, truth) == pytest.approx(expected)
    assert ssr(m, truth, corrected=False) == pytest.approx(math.sqrt(2.0 / 0.25))


def test_ssr_zero_skill_is_inf_with_warning():
    truth = np.zeros(4)
    m = np.stack([truth + 1, truth - 1])
    with pytest.warns(SkillWarning):
        assert ssr(m, truth) == math.inf


def test_ssr_calibrated_gaussian_ensemble():
    s = Stream(21, lanes=256)
    g = 10_000
    # truth is itself a draw from the forecast distribution around a centre
    centre = s.normal(g)
    members = centre[None] + s.normal(25 * g).reshape(25, g)
    truth = centre + s.normal(g)
    assert abs(ssr(members, truth) - 1) < 0.05


def test_ssr_needs_two_members():
    with pytest.raises(EstimatorError):
        ssr(np.zeros((1, 3)), np.zeros(3))


def test_mean_spread():
    assert mean_spread(np.ones((3, 4))) == 0
    assert mean_spread(np.stack([np.zeros(5), 2 * np.ones(5)])) == pytest.approx(math.sqrt(2))


def test_scores_accumulate_in_float64():
    m = np.full((2, 1000), 1e4, dtype=np.float32)
    m[1] += 1
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert crps_fair(m, np.float32(1e4)).dtype == np.float64


# Monte-Carlo oracles (reduced draws; the acceptance suite uses the full sizes) ------------


def test_fair_unbiased_reduced():
    r = crps_unbiasedness(obs=0.0, sizes=(2, 8), draws=40_000, seed=3)
    for n, v in r["sizes"].items():
        assert abs(v["fair"] - r["exact"]) < 4 * v["fair_se"], (n, v)
        assert abs(v["biased_excess"] - v["expected_excess"]) < 4 * v["biased_se"]


def test_propriety_reduced():
    mus, sigmas, table = propriety_scan(draws=20_000, seed=5)
    i, j = np.unravel_index(np.argmin(table), table.shape)
    assert (mus[i], sigmas[j]) == (0.0, 1.0)
