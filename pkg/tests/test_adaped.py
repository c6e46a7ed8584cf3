import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from fedbayes.adaped import (AdaPedConfig, Classifier, DpAdaPedConfig, accuracy, adaped_finetune_run,
                             adaped_run, cross_entropy, dp_adaped_run, kd_loss, kd_population_density,
                             local_objective, local_only_run, psi_gradient,
                             synthetic_classification_tasks)
from fedbayes.errors import ParameterError
from fedbayes.privacy import ClipSpec, adaped_rdp


def _central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


MODELS = [Classifier(4, 3), Classifier(4, 2, hidden=5)]


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.architecture)
def test_probabilities_normalized(model):
    g = np.random.default_rng(0)
    p = model.probs(g.normal(size=model.n_params), g.normal(size=(7, 4)))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.architecture)
def test_cross_entropy_gradient_fd(model):
    g = np.random.default_rng(1)
    X, y = g.normal(size=(6, 4)), g.integers(model.classes, size=6)
    for _ in range(20):
        w = g.normal(size=model.n_params)
        _, grad = cross_entropy(model, w, X, y)
        num = _central_diff(lambda v: cross_entropy(model, v, X, y)[0], w)
        assert _rel_err(grad, num) <= 1e-5


@pytest.mark.parametrize("direction", ["forward", "reverse"])
@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.architecture)
def test_kd_gradients_fd(model, direction):
    g = np.random.default_rng(2)
    X = g.normal(size=(5, 4))
    for _ in range(20):
        th, mu = g.normal(size=model.n_params), g.normal(size=model.n_params)
        _, g_th, g_mu = kd_loss(model, th, mu, X, direction)
        num_th = _central_diff(lambda v: kd_loss(model, v, mu, X, direction)[0], th)
        num_mu = _central_diff(lambda v: kd_loss(model, th, v, X, direction)[0], mu)
        assert _rel_err(g_th, num_th) <= 1e-5
        assert _rel_err(g_mu, num_mu) <= 1e-5


def test_psi_gradient_fd():
    g = np.random.default_rng(3)
    for _ in range(20):
        psi, kd = g.uniform(0.3, 5), g.uniform(0, 3)
        f = lambda p: 0.5 * math.log(2 * p[0]) + kd / (2 * p[0])
        num = _central_diff(f, np.array([psi]))[0]
        assert abs(psi_gradient(psi, kd) - num) <= 1e-5 * abs(num) + 1e-12


def test_kd_examples(oracles):
    model = Classifier(1, 2)
    th = np.array([0.3, -0.3, 0.1, 0.0])
    val, g_th, _ = kd_loss(model, th, th, np.ones((3, 1)))
    assert val == 0.0
    np.testing.assert_allclose(g_th, 0.0, atol=1e-15)
    # p_mu = (0.8, 0.2) from logits (log 4, 0); p_theta uniform
    mu = np.array([0.0, 0.0, math.log(4.0), 0.0])
    val, _, _ = kd_loss(model, np.zeros(4), mu, np.zeros((1, 1)))
    assert val == pytest.approx(oracles["kd_example"], rel=1e-12)
    with pytest.raises(ParameterError):
        kd_loss(model, th, th, np.zeros((0, 1)))


def test_local_objective_and_psi_gradient_examples():
    model = Classifier(1, 2)
    w = np.zeros(4)
    X, y = np.zeros((2, 1)), np.array([0, 1])
    # uniform predictions give f_i = ln 2; KD = 0 and psi = 0.5 leave f_i
    assert local_objective(model, w, w, 0.5, X, y) == pytest.approx(math.log(2))
    assert psi_gradient(1.0, 1.0) == 0.0
    assert psi_gradient(0.5, 0.0) == pytest.approx(1.0)
    assert psi_gradient(1.0, 2.0) < 0
    with pytest.raises(ParameterError):
        local_objective(model, w, w, 0.0, X, y)
    # optimum over psi at psi = f_KD
    kd = 0.7
    grid = np.linspace(0.1, 3, 2901)
    vals = 0.5 * np.log(2 * grid) + kd / (2 * grid)
    assert grid[np.argmin(vals)] == pytest.approx(kd, abs=1e-3)
    mu = np.array([0.0, 0.0, 1.0, 0.0])
    X1 = np.ones((2, 1))
    far = local_objective(model, w, 2 * mu, 1.0, X1, y)
    near = local_objective(model, w, mu, 1.0, X1, y)
    assert near < far


@pytest.fixture(scope="module")
def tasks():
    return synthetic_classification_tasks(8, 30, 4, 0, n_test=50)


def _cfg(**kw):
    base = dict(T=30, tau=3, K=None, psi0=2.0)
    base.update(kw)
    return AdaPedConfig(**base)


def test_determinism(tasks):
    train, test, _ = tasks
    model = Classifier(4, 2)
    a = adaped_run(train, _cfg(K=5, batch_size=10), 7, model, test)
    b = adaped_run(train, _cfg(K=5, batch_size=10), 7, model, test)
    np.testing.assert_array_equal(a.state.theta, b.state.theta)
    assert a.history == b.history


def test_no_kd_equals_local_training(tasks):
    train, test, _ = tasks
    model = Classifier(4, 2)
    cfg = _cfg(tau=1, use_kd=False)
    run = adaped_run(train, cfg, 0, model, test)
    loc = local_only_run(train, cfg, 0, model, test)
    np.testing.assert_array_equal(run.state.theta, loc.state.theta)
    # explicit per-client gradient descent from the shared init
    x, y = train[2].x, train[2].y
    w = np.zeros(model.n_params)
    for _ in range(cfg.T):
        w = w - cfg.eta1 * cross_entropy(model, w, x, y)[1]
    np.testing.assert_allclose(run.state.theta[2], w, rtol=1e-12, atol=1e-14)


def test_psi_floor_respected(tasks):
    train, _, _ = tasks
    res = adaped_run(train, _cfg(T=60, psi0=0.6, eta3=0.5), 1, Classifier(4, 2))
    assert all(h["psi"] >= 0.5 for h in res.history)
    assert np.all(res.state.psi_local >= 0.5)
    assert res.state.psi == pytest.approx(0.5)


def test_server_average_over_sampled(tasks):
    train, _, _ = tasks
    res = adaped_run(train, _cfg(T=6, tau=3, K=3), 2, Classifier(4, 2))
    st = res.state
    np.testing.assert_array_equal(st.mu, st.mu_local[st.sampled].mean(axis=0))


def test_finetune_degenerate_cases(tasks):
    train, test, _ = tasks
    model = Classifier(4, 2)
    base = adaped_run(train, _cfg(K=3), 3, model, test)
    capped = adaped_finetune_run(train, _cfg(K=3, finetune_cap=0), 3, model, test)
    np.testing.assert_array_equal(base.state.theta, capped.state.theta)
    full = adaped_run(train, _cfg(), 3, model, test)
    full_ft = adaped_finetune_run(train, _cfg(), 3, model, test)
    np.testing.assert_array_equal(full.state.theta, full_ft.state.theta)


def test_dp_zero_noise_is_bitwise_adaped(tasks):
    train, test, _ = tasks
    model = Classifier(4, 2)
    base = adaped_run(train, _cfg(K=5), 4, model, test)
    for mode in ("separate", "joint"):
        dp = DpAdaPedConfig(ClipSpec(1e12, 1e12, mode), 0.0, 0.0)
        run = dp_adaped_run(train, _cfg(K=5), dp, 4, model, test)
        np.testing.assert_array_equal(base.state.theta, run.state.theta)
        np.testing.assert_array_equal(base.state.mu, run.state.mu)
        assert base.state.psi == run.state.psi


def test_dp_clip_norm_and_accountant(tasks):
    train, _, _ = tasks
    for mode in ("separate", "joint"):
        spec = ClipSpec(0.01, 0.02, mode)
        dp = DpAdaPedConfig(spec, 0.5, 0.5)
        run = dp_adaped_run(train, _cfg(K=4), dp, 5, Classifier(4, 2))
        assert 0 < run.max_clipped_norm <= 0.01 * (1 + 1e-12)
        for alpha in (1.5, 2.0, 10.0):
            expected = adaped_rdp(alpha, 4, 8, 30, 3, spec, 0.5, 0.5)
            assert run.rdp(alpha) == pytest.approx(expected, rel=1e-12)


def test_accuracy_helper():
    model = Classifier(1, 2)
    w = np.array([0.0, 0.0, 1.0, 0.0])  # class 1 iff x > 0
    X = np.array([[1.0], [-1.0], [2.0]])
    assert accuracy(model, w, X, np.array([1, 0, 0])) == pytest.approx(2 / 3)


def test_kd_density_quadrature(oracles):
    dens = kd_population_density([0.5], 1.0, [1.0])
    a, b = dens.beta_params
    assert (a[0], b[0]) == (1.5, 1.5)
    assert dens.log_normalizer() == pytest.approx(oracles["kd_density_half"]["log_normalizer"], rel=1e-12)
    total, _ = integrate.quad(lambda q: dens.density([q]), 0, 1)
    assert total == pytest.approx(1.0, abs=1e-6)
    # c(psi) exp(-psi KL) is the same normalized density
    c = dens.log_normalizer()
    via_kl, _ = integrate.quad(lambda q: math.exp(c + dens.unnormalized_log_density([q])), 0, 1)
    assert via_kl == pytest.approx(1.0, abs=1e-6)


def test_kd_density_two_inputs_normalized():
    dens = kd_population_density([0.2, 0.7], 3.0, [0.4, 0.6])
    c = dens.log_normalizer()
    total, _ = integrate.dblquad(lambda q2, q1: math.exp(c + dens.unnormalized_log_density([q1, q2])),
                                 0, 1, 0, 1, epsabs=1e-9)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_kd_density_limits_and_mode():
    flat = kd_population_density([0.3, 0.8], 1e-12, [0.5, 0.5])
    for q in ([0.1, 0.9], [0.5, 0.5], [0.99, 0.01]):
        assert flat.density(q) == pytest.approx(1.0, rel=1e-9)
    dens = kd_population_density([0.3, 0.8], 5.0, [0.5, 0.5])
    grid = np.linspace(0.001, 0.999, 999)
    for j, target in enumerate([0.3, 0.8]):
        vals = [dens.log_density([q, 0.5] if j == 0 else [0.5, q]) for q in grid]
        assert grid[int(np.argmax(vals))] == pytest.approx(target, abs=1e-3)
    with pytest.raises(ParameterError):
        kd_population_density([0.5], 1.0, [1.0], n_classes=3)


def test_homogeneous_psi_decreases():
    train, _, _ = synthetic_classification_tasks(10, 40, 5, 0, homogeneous=True, n_test=10)
    res = adaped_run(train, AdaPedConfig(T=60, tau=5, psi0=4.0), 0, Classifier(5, 2))
    assert res.state.psi < 4.0


def test_config_validation():
    with pytest.raises(ParameterError):
        AdaPedConfig(psi_floor=0.0)
    with pytest.raises(ParameterError):
        adaped_run(synthetic_classification_tasks(3, 5, 2, 0)[0], AdaPedConfig(K=4, T=1), 0,
                   Classifier(2, 2))
    assert replace(AdaPedConfig.paper(), T=5).T == 5


def _heterogeneous(seed):
    return synthetic_classification_tasks(30, 50, 10, seed)


def test_finetune_helps_with_partial_participation():
    model = Classifier(10, 2)
    cfg = AdaPedConfig(T=200, tau=5, K=9)
    base, ft = [], []
    for s in range(5):
        train, test, _ = _heterogeneous(s)
        base.append(adaped_run(train, cfg, s, model, test).mean_accuracy)
        ft.append(adaped_finetune_run(train, cfg, s, model, test).mean_accuracy)
    assert np.mean(ft) >= np.mean(base)


def test_heavy_model_noise_raises_psi():
    # noise on the global-model update inflates the KD term, which raises the
    # stationary psi; the psi-gradient noise is kept small since it only adds
    # a zero-mean random walk
    model = Classifier(10, 2)
    cfg = AdaPedConfig(T=200, tau=5)
    dp = DpAdaPedConfig(ClipSpec(1.0, 1.0), 10.0, 0.5)
    plain, noisy = [], []
    for s in range(5):
        train, _, _ = _heterogeneous(s)
        plain.append(adaped_run(train, cfg, s, model).state.psi)
        noisy.append(dp_adaped_run(train, cfg, dp, s, model).state.psi)
    assert np.mean(noisy) >= np.mean(plain)
