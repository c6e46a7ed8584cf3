import math
import warnings

import numpy as np
import pytest

from fedbayes.core import GaussianPrior, sample_gaussian_population
from fedbayes.errors import ParameterError
from fedbayes.gauss_est import (clip_radius_b, constrained_personalized_gaussian,
                                exact_mse_gaussian, personalized_gaussian, shrinkage_weight,
                                theoretical_mse_gaussian, van_trees_bound)
from fedbayes.privacy import MechanismSpec


def test_shrinkage_weight_examples():
    assert shrinkage_weight(0.0, 1.0, 5) == 0.0
    assert shrinkage_weight(1.0, 1.0, 1) == pytest.approx(0.5)
    assert shrinkage_weight(1.0, 1e-12, 3) == pytest.approx(1.0)
    assert shrinkage_weight(1.0, 1.0, 1, sigma_q_sq=2.0, m=3) == pytest.approx(2 / 3)
    with pytest.raises(ParameterError):
        shrinkage_weight(1.0, 1.0, 1, sigma_q_sq=1.0, m=1)


def test_personalized_gaussian_examples():
    xbar = np.array([[2.0], [0.0]])
    rep = personalized_gaussian(xbar, 0.5)
    np.testing.assert_allclose(rep.global_estimate, [1.0])
    np.testing.assert_allclose(rep.estimates[:, 0], [1.5, 0.5])
    np.testing.assert_array_equal(personalized_gaussian(xbar, 1.0).estimates, xbar)
    np.testing.assert_allclose(personalized_gaussian(xbar, 0.0).estimates, [[1.0], [1.0]])
    with pytest.raises(ParameterError):
        personalized_gaussian(np.empty((0, 1)), 0.5)


def test_remark_ratio():
    a = shrinkage_weight(1e-3, 10.0, 100)
    assert (1 - a) / 1e4 + a == pytest.approx(0.01, abs=1e-3)


def test_theoretical_mse_limits():
    prior = GaussianPrior(np.zeros(3), 0.2, 2.0)
    assert theoretical_mse_gaussian(prior, 4, 10, 1.0) == pytest.approx(3 * 2.0 / 4)
    assert theoretical_mse_gaussian(prior, 4, 10 ** 12, 0.3) == pytest.approx(0.3 * 1.5, rel=1e-9)
    for a in np.linspace(0, 1, 11):
        assert theoretical_mse_gaussian(prior, 4, 10, a) <= 1.5 + 1e-15


def test_exact_mse_matches_theorem_at_optimal_weight():
    rng = np.random.default_rng(0)
    for _ in range(20):
        st, sx = rng.uniform(0.01, 2), rng.uniform(0.1, 5)
        n, m, d = int(rng.integers(1, 50)), int(rng.integers(2, 1000)), int(rng.integers(1, 6))
        prior = GaussianPrior(np.zeros(d), st, sx)
        a = shrinkage_weight(st, sx, n)
        assert exact_mse_gaussian(prior, n, m, a) == pytest.approx(
            theoretical_mse_gaussian(prior, n, m, a), rel=1e-12)


def test_mc_agreement():
    rng = np.random.default_rng(1)
    for k in range(3):
        st, sx = rng.uniform(0.05, 1), rng.uniform(0.2, 3)
        prior = GaussianPrior(np.zeros(2), st, sx)
        data = sample_gaussian_population(prior, 1000, 5, 100 + k)
        rep = personalized_gaussian(data, shrinkage_weight(st, sx, 5))
        assert abs(rep.mse - rep.theoretical_mse) < 3 * rep.mse_se


def test_identity_mechanism_matches_unconstrained():
    prior = GaussianPrior(np.zeros(2), 0.1, 1.0)
    data = sample_gaussian_population(prior, 200, 4, 0)
    a = shrinkage_weight(0.1, 1.0, 4)
    r1 = personalized_gaussian(data, a)
    r2 = constrained_personalized_gaussian(data, MechanismSpec.identity(), 0)
    np.testing.assert_allclose(r1.estimates, r2.estimates, rtol=1e-15)


def test_fine_quantizer_close_to_unconstrained():
    prior = GaussianPrior(np.zeros(1), 0.1, 1.0)
    data = sample_gaussian_population(prior, 1000, 10, 3)
    b = clip_radius_b(0.0, math.sqrt(0.1), 1.0, 10, 1000)
    base = constrained_personalized_gaussian(data, MechanismSpec.identity(), 3)
    q = constrained_personalized_gaussian(data, MechanismSpec.quantizer(20, b), 3)
    assert q.mse == pytest.approx(base.mse, rel=0.01)


def test_projection_reported():
    prior = GaussianPrior(np.zeros(1), 1.0, 1.0)
    data = sample_gaussian_population(prior, 500, 1, 0)
    rep = constrained_personalized_gaussian(data, MechanismSpec.quantizer(4, 0.5), 0)
    assert 0 < rep.projected_fraction < 1
    assert rep.mse_unprojected is not None


def test_private_global_mean_unbiased_without_projection():
    prior = GaussianPrior(np.zeros(1), 0.01, 0.25)
    data = sample_gaussian_population(prior, 200, 15, 0)
    b = clip_radius_b(0.0, 0.1, 0.5, 15, 200)
    assert np.all(np.abs(data.means()) <= b)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mech = MechanismSpec.gaussian_ldp(2.0, 1e-3, b)
    est = [constrained_personalized_gaussian(data, mech, s).global_estimate[0] for s in range(300)]
    target = data.true_params.mean()
    se = mech.sigma_q / math.sqrt(200 * 300)
    xbar_dev = data.means().mean() - target  # data noise is fixed across channel seeds
    assert abs(np.mean(est) - target - xbar_dev) < 4 * se


def test_clip_radius_examples():
    assert clip_radius_b(0.7, 1.0, 1.0, 1, 1) == 0.7
    assert clip_radius_b(0.0, 1.0, 1.0, 1, 9) == pytest.approx(2 * math.sqrt(math.log(81)))
    base = clip_radius_b(0.1, 0.2, 0.3, 5, 10)
    assert clip_radius_b(0.2, 0.2, 0.3, 5, 10) >= base
    assert clip_radius_b(0.1, 0.3, 0.3, 5, 10) >= base
    assert clip_radius_b(0.1, 0.2, 0.4, 5, 10) >= base


def test_van_trees():
    assert van_trees_bound(1.0, 1.0, 1, 1) == pytest.approx(0.5)
    assert van_trees_bound(0.3, 2.0, 4, 2, m=10 ** 12, mode="estimated_mean") == pytest.approx(
        van_trees_bound(0.3, 2.0, 4, 2), rel=1e-9)
    with pytest.raises(ParameterError):
        van_trees_bound(0.0, 1.0, 1, 1)


def test_van_trees_is_large_m_theorem_value():
    rng = np.random.default_rng(5)
    for _ in range(50):
        st, sx = rng.uniform(0.01, 3), rng.uniform(0.01, 3)
        n, d = int(rng.integers(1, 100)), int(rng.integers(1, 10))
        prior = GaussianPrior(np.zeros(d), st, sx)
        a = shrinkage_weight(st, sx, n)
        limit = theoretical_mse_gaussian(prior, n, 10 ** 15, a)
        assert van_trees_bound(st, sx, n, d) == pytest.approx(limit, rel=1e-9)
        assert van_trees_bound(st, sx, n, d) <= theoretical_mse_gaussian(prior, n, 50, a)
