import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedbayes.core import (BetaPrior, ClientDataset, DiscretePrior, GaussianMixturePrior,
                           GaussianPrior, RngContract, ScalarPrior, paper_linreg_prior,
                           sample_bernoulli_population, sample_gaussian_population,
                           sample_mixture_population, sample_regression_population)
from fedbayes.errors import ParameterError


# --- RngContract ------------------------------------------------------------

def test_same_tuple_same_stream():
    r = RngContract(7)
    a = r.stream("x", 3, 2).random(16)
    b = r.stream("x", 3, 2).random(16)
    assert np.array_equal(a, b)


def test_server_and_client_zero_differ():
    r = RngContract(7)
    assert not np.array_equal(r.stream("x", None).random(4), r.stream("x", 0).random(4))


def test_no_collisions_over_sweep():
    r = RngContract(123)
    seen = set()
    for tag in ("a", "b"):
        for cid in range(50):
            for rnd in range(100):
                draws = r.stream(tag, cid, rnd).integers(0, 2 ** 63, size=16)
                seen.add(draws.tobytes())
    assert len(seen) == 2 * 50 * 100


@pytest.mark.parametrize("bad", [-1, 1.5, 2 ** 64])
def test_bad_master_seed(bad):
    with pytest.raises(ParameterError):
        RngContract(bad)


# --- priors -----------------------------------------------------------------

def test_gaussian_prior_validation():
    with pytest.raises(ParameterError):
        GaussianPrior(np.zeros(2), -1.0, 1.0)
    with pytest.raises(ParameterError):
        GaussianPrior(np.zeros(2), 1.0, 0.0)
    assert GaussianPrior([1.0, 2.0], 0.0, 1.0).d == 2


def test_beta_prior_moments():
    p = BetaPrior(2.0, 3.0)
    assert p.mean == pytest.approx(0.4)
    assert p.var == pytest.approx(6 / (25 * 6))
    with pytest.raises(ParameterError):
        BetaPrior(0.0, 1.0)


def test_discrete_prior_validation():
    with pytest.raises(ParameterError):
        DiscretePrior([0.5, 0.6], [[0.0], [1.0]])
    with pytest.raises(ParameterError):
        DiscretePrior([0.5, 0.5], [[0.0], [3.0]], radius_r=1.0)
    p = DiscretePrior([0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]])
    assert (p.k, p.d) == (2, 2)


def test_mixture_prior_needs_positive_sds():
    with pytest.raises(ParameterError):
        GaussianMixturePrior([1.0], [[0.0]], [0.0])


@pytest.mark.parametrize("prior", [ScalarPrior.beta(2, 5), ScalarPrior.three_spike(),
                                   ScalarPrior.uniform(), ScalarPrior.clipped_normal()])
def test_scalar_prior_moments(prior):
    draws = prior.sample(np.random.default_rng(0), size=100_000)
    assert np.all((draws >= 0) & (draws <= 1))
    se_mean = np.sqrt(prior.var / draws.size)
    assert abs(draws.mean() - prior.mean) < 4 * se_mean
    # variance of the sample variance: (mu4 - var^2) / N, estimated from the draws
    c = draws - draws.mean()
    se_var = np.sqrt((np.mean(c ** 4) - np.mean(c ** 2) ** 2) / draws.size)
    assert abs(draws.var() - prior.var) < 4 * se_var


def test_three_spike_support():
    draws = ScalarPrior.three_spike().sample(np.random.default_rng(1), size=3000)
    assert set(np.unique(draws)) == {0.25, 0.5, 0.75}


# --- datasets ---------------------------------------------------------------

def test_client_dataset_copies_and_freezes():
    x = np.zeros(3)
    ds = ClientDataset(0, x)
    x[0] = 1.0
    assert ds.x[0] == 0.0
    with pytest.raises(ValueError):
        ds.x[0] = 2.0
    assert x.flags.writeable


def test_zero_variance_gaussian_population():
    prior = GaussianPrior([1.0, -2.0], 0.0, 1.0)
    data = sample_gaussian_population(prior, 20, 3, 0)
    assert np.all(data.true_params == prior.mu)


def test_gaussian_population_determinism():
    prior = GaussianPrior([0.0], 1.0, 1.0)
    a = sample_gaussian_population(prior, 2, 1, 5)
    b = sample_gaussian_population(prior, 2, 1, 5)
    assert np.array_equal(a.stacked()[0], b.stacked()[0])
    assert np.array_equal(a.true_params, b.true_params)


def test_gaussian_population_mean():
    m = 10_000
    data = sample_gaussian_population(GaussianPrior([0.0], 1.0, 1.0), m, 1, 3)
    assert abs(data.true_params.mean()) < 4 / np.sqrt(m)


def test_exchangeability_of_client_ids():
    prior = GaussianPrior([0.0, 0.0], 1.0, 1.0)
    ids = np.array([4, 1, 3, 0, 2])
    a = sample_gaussian_population(prior, 5, 2, 9)
    b = sample_gaussian_population(prior, 5, 2, 9, client_ids=ids)
    for row, cid in enumerate(ids):
        assert np.array_equal(b.clients[row].x, a.clients[cid].x)


def test_three_spike_population_mean():
    data = sample_bernoulli_population(ScalarPrior.three_spike(), 30_000, 2, 0)
    assert abs(data.true_params.mean() - 0.5) < 0.01


def test_bernoulli_forced_one():
    data = sample_bernoulli_population(ScalarPrior.beta(1e6, 1e-6), 10, 7, 0)
    assert np.all(data.sums() == 7)


def test_beta22_bernoulli_mean():
    m, n = 5000, 10
    data = sample_bernoulli_population(BetaPrior(2, 2), m, n, 4)
    zbar = data.sums() / n
    assert abs(zbar.mean() - 0.5) < 3 * zbar.std(ddof=1) / np.sqrt(m)


def test_mixture_population_single_center():
    prior = DiscretePrior([1.0], [[2.0, 3.0]])
    data = sample_mixture_population(prior, 50, 2, 1.0, 0)
    assert np.all(data.true_params == [2.0, 3.0])


def test_mixture_population_zero_probability():
    prior = DiscretePrior([1.0, 0.0], [[0.0], [1.0]])
    data = sample_mixture_population(prior, 100, 1, 1.0, 0)
    assert np.all(data.labels == 0)


def test_mixture_population_balance():
    prior = DiscretePrior([0.5, 0.5], [[0.0], [1.0]])
    data = sample_mixture_population(prior, 10_000, 1, 1.0, 0)
    assert abs(data.labels.mean() - 0.5) < 0.02


def test_regression_noise_free():
    prior = GaussianPrior([2.0], 0.0, 1e-300)
    data = sample_regression_population(prior, 3, 4, 1.0, 0)
    for c in data.clients:
        np.testing.assert_allclose(c.y, 2.0 * c.x[:, 0], rtol=1e-12)


def test_regression_feature_variance():
    prior = GaussianPrior(np.zeros(5), 0.01, 0.05)
    data = sample_regression_population(prior, 400, 50, np.sqrt(0.05), 0)
    X = np.concatenate([c.x for c in data.clients])
    assert X.var() == pytest.approx(0.05, rel=0.02)


def test_paper_linreg_prior_values():
    p = paper_linreg_prior(50, 0)
    assert (p.sigma_theta_sq, p.sigma_x_sq, p.d) == (0.01, 0.05, 50)
    assert np.std(p.mu) < 0.2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32), m=st.integers(1, 5), n=st.integers(1, 4))
def test_sampling_is_pure(seed, m, n):
    prior = GaussianPrior([0.0, 1.0], 0.5, 2.0)
    a = sample_gaussian_population(prior, m, n, seed)
    b = sample_gaussian_population(prior, m, n, RngContract(seed))
    assert np.array_equal(a.stacked()[0], b.stacked()[0])
