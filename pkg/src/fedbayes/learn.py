"""Personalized regression with a learned Gaussian or mixture population prior.

Clients hold (X_i, Y_i). The population prior over client parameters is
estimated jointly with the personalized models by alternating gradient
steps (Gaussian prior) or by server-side clustering (mixture priors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit, logsumexp

from .core import ClientDataset, GaussianMixturePrior, SyntheticDataset, _as_contract
from .errors import DivergenceError, ParameterError
from .mixture_est import lloyd_cluster

__all__ = [
    "VAR_FLOOR",
    "GDConfig",
    "LearnState",
    "LearnResult",
    "RegularizerValue",
    "stack_clients",
    "linreg_closed_form",
    "linreg_mse_trace",
    "ols_local",
    "client_loss",
    "prior_term",
    "full_objective",
    "linreg_gd_run",
    "logreg_gd_run",
    "gmm_prior_regularizer",
    "gmm_prior_learning",
    "discrete_prior_regression",
    "fedavg_baseline",
]

VAR_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Data plumbing


@dataclass
class Stacked:
    """Clients padded to a common sample count; ``mask`` marks real rows."""

    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    ids: list

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    @property
    def n_i(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def stack_clients(datasets) -> Stacked:
    """Accept a SyntheticDataset or a sequence of (X_i, Y_i) pairs."""
    if isinstance(datasets, Stacked):
        return datasets
    if isinstance(datasets, SyntheticDataset):
        pairs = [(c.x, c.y) for c in datasets.clients]
        ids = [c.client_id for c in datasets.clients]
    else:
        items = list(datasets)
        pairs, ids = [], []
        for j, item in enumerate(items):
            if isinstance(item, ClientDataset):
                x, y = item.x, item.y
                ids.append(item.client_id)
            else:
                x, y = item
                ids.append(j)
            pairs.append((np.asarray(x, dtype=float), np.asarray(y, dtype=float)))
    if not pairs:
        raise ParameterError("no clients")
    d = np.atleast_2d(pairs[0][0]).shape[1]
    n_max = max(len(y) for _, y in pairs)
    m = len(pairs)
    X = np.zeros((m, n_max, d))
    Y = np.zeros((m, n_max))
    mask = np.zeros((m, n_max))
    for i, (x, y) in enumerate(pairs):
        x = np.asarray(x, dtype=float).reshape(-1, d)
        k = x.shape[0]
        X[i, :k], Y[i, :k], mask[i, :k] = x, y, 1.0
    return Stacked(X, Y, mask, ids)


# ---------------------------------------------------------------------------
# Closed forms


def linreg_closed_form(X, Y, mu, sigma_theta_sq: float, sigma_x_sq: float) -> np.ndarray:
    """MAP / posterior mean (I/s_th + X'X/s_x)^-1 (X'Y/s_x + mu/s_th)."""
    if not (sigma_theta_sq > 0 and sigma_x_sq > 0):
        raise ParameterError("variances must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    d = X.shape[1]
    A = np.eye(d) / sigma_theta_sq + X.T @ X / sigma_x_sq
    b = X.T @ Y / sigma_x_sq + np.asarray(mu, dtype=float) / sigma_theta_sq
    return linalg.solve(A, b, assume_a="pos")


def linreg_mse_trace(X, sigma_theta_sq: float, sigma_x_sq: float) -> float:
    """Tr((I/s_th + X'X/s_x)^-1), the Bayes risk of the closed form."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = X.shape[1]
    A = np.eye(d) / sigma_theta_sq + X.T @ X / sigma_x_sq
    c = linalg.cho_factor(A)
    return float(np.trace(linalg.cho_solve(c, np.eye(d))))


def ols_local(X, Y) -> np.ndarray:
    """Least squares, minimum-norm when X'X is singular."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.linalg.lstsq(X, np.asarray(Y, dtype=float).ravel(), rcond=None)[0]


# ---------------------------------------------------------------------------
# Losses and gradients (vectorized over clients)


def client_loss(kind: str, theta, data: Stacked, sigma_x_sq=None):
    """Per-client data term f_i and its gradients.

    Returns (value, grad_theta, grad_sigma_x_sq). For ``linreg`` the data
    term is RSS/(2 s_x) + (n/2) log(2 pi s_x); for ``logreg`` it is the
    summed cross-entropy and the variance gradient is None.
    """
    z = np.einsum("mnd,md->mn", data.X, theta)
    if kind == "linreg":
        sx = np.broadcast_to(np.asarray(sigma_x_sq, dtype=float), (data.m,))
        r = (data.Y - z) * data.mask
        rss = np.sum(r * r, axis=1)
        n = data.n_i
        val = rss / (2 * sx) + 0.5 * n * (_LOG_2PI + np.log(sx))
        g_theta = -np.einsum("mnd,mn->md", data.X, r) / sx[:, None]
        g_sx = n / (2 * sx) - rss / (2 * sx * sx)
        return val, g_theta, g_sx
    if kind == "logreg":
        # -[y log s(z) + (1 - y) log s(-z)]
        ce = -(data.Y * log_expit(z) + (1 - data.Y) * log_expit(-z)) * data.mask
        val = ce.sum(axis=1)
        g_theta = np.einsum("mnd,mn->md", data.X, (expit(z) - data.Y) * data.mask)
        return val, g_theta, None
    raise ParameterError(f"unknown loss kind {kind!r}")


def prior_term(theta, mu, sigma_theta_sq):
    """||mu - theta||^2/(2 s_th) + (d/2) log(2 pi s_th) and its gradients.

    Returns (value, grad_theta, grad_mu, grad_sigma_theta_sq).
    """
    theta = np.atleast_2d(theta)
    mu = np.broadcast_to(mu, theta.shape)
    st = np.broadcast_to(np.asarray(sigma_theta_sq, dtype=float), (theta.shape[0],))
    d = theta.shape[1]
    diff = mu - theta
    dev = np.sum(diff * diff, axis=1)
    val = dev / (2 * st) + 0.5 * d * (_LOG_2PI + np.log(st))
    g_theta = -diff / st[:, None]
    g_mu = diff / st[:, None]
    g_st = d / (2 * st) - dev / (2 * st * st)
    return val, g_theta, g_mu, g_st


def full_objective(kind: str, theta, mu, sigma_theta_sq, data, sigma_x_sq=None) -> float:
    """Sum over clients of the data term and the Gaussian prior term."""
    data = stack_clients(data)
    f = client_loss(kind, theta, data, sigma_x_sq)[0]
    p = prior_term(theta, mu, sigma_theta_sq)[0]
    return float(np.sum(f) + np.sum(p))


# ---------------------------------------------------------------------------
# Alternating gradient descent with a Gaussian prior


@dataclass(frozen=True)
class GDConfig:
    """Hyperparameters of the alternating gradient runs.

    ``decay`` multiplies the step size after every full-batch iteration.
    ``tau`` is the number of local iterations between server averaging.
    ``frozen`` names globals held fixed (any of mu, sigma_theta_sq,
    sigma_x_sq).
    """

    eta: float = 0.01
    T: int = 1000
    tau: int = 1
    decay: float = 1.0
    weight_decay: float = 0.0
    frozen: tuple = ()
    var_floor: float = VAR_FLOOR
    record_every: int = 1
    init: str = "ols"

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError("eta must be > 0")
        if self.T < 1 or self.tau < 1:
            raise ParameterError("T and tau must be >= 1")
        if not 0 < self.decay <= 1:
            raise ParameterError("decay must lie in (0, 1]")
        bad = set(self.frozen) - {"mu", "sigma_theta_sq", "sigma_x_sq"}
        if bad:
            raise ParameterError(f"cannot freeze {sorted(bad)}")


@dataclass
class LearnState:
    theta: np.ndarray
    mu_local: np.ndarray
    sigma_theta_sq_local: np.ndarray
    sigma_x_sq_local: Optional[np.ndarray]
    mu: np.ndarray
    sigma_theta_sq: float
    sigma_x_sq: Optional[float]
    round: int = 0

    def copy(self) -> "LearnState":
        return LearnState(
            self.theta.copy(), self.mu_local.copy(), self.sigma_theta_sq_local.copy(),
            None if self.sigma_x_sq_local is None else self.sigma_x_sq_local.copy(),
            self.mu.copy(), self.sigma_theta_sq, self.sigma_x_sq, self.round)


@dataclass
class LearnResult:
    state: LearnState
    history: List[dict] = field(default_factory=list)

    def trajectory_rows(self):
        """Rows (round, "server", quantity, value)."""
        rows = []
        for h in self.history:
            for key, val in h.items():
                if key != "round":
                    rows.append((h["round"], "server", key, val))
        return rows


def _initial_state(kind: str, data: Stacked, init, config: GDConfig) -> LearnState:
    m, d = data.m, data.d
    init = dict(init or {})
    mode = init.pop("mode", config.init)
    if mode == "ols":
        theta0 = np.stack([ols_local(data.X[i, data.mask[i] > 0], data.Y[i, data.mask[i] > 0])
                           if data.mask[i].any() else np.zeros(d) for i in range(m)])
    elif mode == "zeros":
        theta0 = np.zeros((m, d))
    else:
        raise ParameterError(f"unknown init mode {mode!r}")
    theta = np.asarray(init.get("theta", theta0), dtype=float).reshape(m, d).copy()
    mu = np.asarray(init.get("mu", theta.mean(axis=0)), dtype=float).reshape(d).copy()
    spread = float(np.mean(np.sum((theta - mu) ** 2, axis=1)) / d)
    # identical starting models (zeros init) carry no spread information
    st = float(init.get("sigma_theta_sq", spread if spread > config.var_floor else 1.0))
    if kind == "linreg":
        resid = data.Y[data.mask > 0]
        sx = float(init.get("sigma_x_sq", max(float(np.var(resid)) if resid.size > 1 else 1.0,
                                               config.var_floor)))
        sx_loc = np.full(m, sx)
    else:
        sx, sx_loc = None, None
    return LearnState(theta, np.tile(mu, (m, 1)), np.full(m, st), sx_loc, mu, st, sx)


def _check_finite(state: LearnState, t: int, obj: float):
    if not np.isfinite(obj) or not np.all(np.isfinite(state.theta)):
        raise DivergenceError(f"non-finite state at iteration {t}", iteration=t,
                              state={"sigma_theta_sq": state.sigma_theta_sq,
                                     "sigma_x_sq": state.sigma_x_sq})


def _gd_run(kind: str, datasets, config: GDConfig, init=None, truth=None) -> LearnResult:
    data = stack_clients(datasets)
    st = _initial_state(kind, data, init, config)
    floor = config.var_floor
    eta = config.eta
    history = []
    if truth is not None:
        truth = np.asarray(truth, dtype=float).reshape(st.theta.shape)

    def record(t):
        rec = {"round": t, "objective": full_objective(kind, st.theta, st.mu, st.sigma_theta_sq,
                                                        data, st.sigma_x_sq),
               "sigma_theta_sq": st.sigma_theta_sq}
        if kind == "linreg":
            rec["sigma_x_sq"] = st.sigma_x_sq
        if truth is not None:
            rec["mse"] = float(np.mean(np.sum((st.theta - truth) ** 2, axis=1)))
        return rec

    history.append(record(0))
    # overflow only happens on divergence, which _check_finite reports
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, config.T + 1):
            _gd_step(kind, st, data, config, eta, floor, t)
            eta *= config.decay
            if t % config.record_every == 0 or t == config.T:
                rec = record(t)
                _check_finite(st, t, rec["objective"])
                history.append(rec)
    return LearnResult(st, history)


def _gd_step(kind: str, st: LearnState, data: Stacked, config: GDConfig, eta: float,
             floor: float, t: int):
    """One alternating iteration, in place, plus server averaging every tau."""
    sx_loc = st.sigma_x_sq_local
    _, g_f, g_sx = client_loss(kind, st.theta, data, sx_loc)
    _, g_p_theta, g_mu, g_st = prior_term(st.theta, st.mu_local, st.sigma_theta_sq_local)
    g_theta = g_f + g_p_theta + config.weight_decay * st.theta

    # every block is updated from the iteration-t values
    new_theta = st.theta - eta * g_theta
    if "mu" not in config.frozen:
        st.mu_local = st.mu_local - eta * g_mu
    if "sigma_theta_sq" not in config.frozen:
        s = st.sigma_theta_sq_local
        st.sigma_theta_sq_local = np.maximum(s * np.exp(-eta * s * g_st), floor)
    if kind == "linreg" and "sigma_x_sq" not in config.frozen:
        st.sigma_x_sq_local = np.maximum(sx_loc * np.exp(-eta * sx_loc * g_sx), floor)
    st.theta = new_theta

    if t % config.tau == 0:
        st.mu = st.mu_local.mean(axis=0)
        st.sigma_theta_sq = max(float(st.sigma_theta_sq_local.mean()), floor)
        st.mu_local = np.tile(st.mu, (data.m, 1))
        st.sigma_theta_sq_local = np.full(data.m, st.sigma_theta_sq)
        if kind == "linreg":
            st.sigma_x_sq = max(float(st.sigma_x_sq_local.mean()), floor)
            st.sigma_x_sq_local = np.full(data.m, st.sigma_x_sq)
    st.round = t


def linreg_gd_run(datasets, config: GDConfig = GDConfig(), init=None, truth=None) -> LearnResult:
    """Alternating gradient descent for personalized linear regression.

    Each iteration every client steps its model theta_i, its copy of the
    global mean mu_i and its copies of both variances (in log space, floored),
    all from the current values. Every ``tau`` iterations the server
    averages the copies and broadcasts them back.
    """
    if isinstance(datasets, SyntheticDataset) and truth is None:
        truth = datasets.true_params
    return _gd_run("linreg", datasets, config, init, truth)


def logreg_gd_run(datasets, config: GDConfig = GDConfig(), init=None, truth=None) -> LearnResult:
    """Alternating gradient descent for personalized logistic regression."""
    if isinstance(datasets, SyntheticDataset) and truth is None:
        truth = datasets.true_params
    return _gd_run("logreg", datasets, config, init, truth)


# ---------------------------------------------------------------------------
# Gaussian-mixture prior


@dataclass
class RegularizerValue:
    value: float
    gradient: np.ndarray


def gmm_prior_regularizer(theta, prior: GaussianMixturePrior) -> RegularizerValue:
    """R(theta) = -log sum_l p_l N(theta; mu_l, s_l^2 I) and its gradient."""
    theta = np.asarray(theta, dtype=float)
    d = prior.d
    var = prior.component_sds ** 2
    diff = theta[None, :] - prior.centers
    with np.errstate(divide="ignore"):
        logp = np.log(prior.probs)
    logc = (logp - 0.5 * d * (_LOG_2PI + np.log(var))
            - np.sum(diff * diff, axis=1) / (2 * var))
    lse = logsumexp(logc)
    resp = np.exp(logc - lse)
    grad = np.sum(resp[:, None] * diff / var[:, None], axis=0)
    return RegularizerValue(float(-lse), grad)


def _gmm_grad_batch(theta, probs, centers, sds):
    d = theta.shape[1]
    var = sds ** 2
    diff = theta[:, None, :] - centers[None, :, :]
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    logc = (logp[None, :] - 0.5 * d * (_LOG_2PI + np.log(var))[None, :]
            - np.sum(diff * diff, axis=2) / (2 * var[None, :]))
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    return np.sum(resp[:, :, None] * diff / var[None, :, None], axis=1)


def _fit_mixture(theta, k, gen, sd_floor, n_init):
    model = lloyd_cluster(theta, k, gen, n_init=n_init)
    d = theta.shape[1]
    sds = np.empty(k)
    for l in range(k):
        members = theta[model.assignment == l]
        if members.shape[0] == 0:
            sds[l] = sd_floor
        else:
            msd = np.mean(np.sum((members - model.centers[l]) ** 2, axis=1)) / d
            sds[l] = max(math.sqrt(msd), sd_floor)
    return GaussianMixturePrior(model.probs, model.centers, sds)


def gmm_prior_learning(datasets, k: int, config: GDConfig, rng, kind: str = "linreg",
                       sigma_x_sq: float = 1.0, sd_floor: float = 1e-3, n_init: int = 3,
                       init=None):
    """Clients step on f_i + R under the current mixture; the server refits it.

    The mixture is refit each round by Lloyd clustering of the received
    models, with component sd equal to the within-cluster RMS deviation per
    coordinate. Returns (theta, list of GaussianMixturePrior per round).
    """
    data = stack_clients(datasets)
    if not 1 <= k <= data.m:
        raise ParameterError("need 1 <= k <= m")
    rng = _as_contract(rng)
    st = _initial_state(kind, data, init, config)
    theta = st.theta
    sx = np.full(data.m, sigma_x_sq)
    prior = _fit_mixture(theta, k, rng.stream("gmm-cluster", None, 0), sd_floor, n_init)
    priors = [prior]
    eta = config.eta
    for t in range(1, config.T + 1):
        for _ in range(config.tau):
            _, g_f, _ = client_loss(kind, theta, data, sx)
            g = g_f + _gmm_grad_batch(theta, prior.probs, prior.centers, prior.component_sds)
            theta = theta - eta * (g + config.weight_decay * theta)
            eta *= config.decay
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite model at round {t}", iteration=t)
        prior = _fit_mixture(theta, k, rng.stream("gmm-cluster", None, t), sd_floor, n_init)
        priors.append(prior)
    return theta, priors


# ---------------------------------------------------------------------------
# Discrete prior regression


@dataclass
class DiscreteRegressionResult:
    estimates: np.ndarray
    trajectory: list
    weights: np.ndarray


def discrete_prior_regression(datasets, k: int, T: int, sigma_x_sq: float, rng,
                              n_init: int = 5) -> DiscreteRegressionResult:
    """Alternate clustering of client models with posterior reweighting.

    Start from local least squares. Each round the server clusters the
    models, then client i sets theta_i = sum_l w_l mu_l with
    w_l proportional to p_l exp(-||X_i mu_l - Y_i||^2 / (2 s_x)).
    """
    data = stack_clients(datasets)
    if not 1 <= k <= data.m or T < 1:
        raise ParameterError("need 1 <= k <= m and T >= 1")
    if not sigma_x_sq > 0:
        raise ParameterError("sigma_x_sq must be > 0")
    rng = _as_contract(rng)
    theta = np.stack([ols_local(data.X[i, data.mask[i] > 0], data.Y[i, data.mask[i] > 0])
                      for i in range(data.m)])
    trajectory, w = [], None
    for t in range(1, T + 1):
        model = lloyd_cluster(theta, k, rng.stream("discrete-cluster", None, t), n_init=n_init)
        trajectory.append(model)
        pred = np.einsum("mnd,kd->mkn", data.X, model.centers)
        r = (pred - data.Y[:, None, :]) * data.mask[:, None, :]
        with np.errstate(divide="ignore"):
            logp = np.log(model.probs)
        logw = logp[None, :] - np.sum(r * r, axis=2) / (2 * sigma_x_sq)
        w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        theta = w @ model.centers
    return DiscreteRegressionResult(theta, trajectory, w)


# ---------------------------------------------------------------------------
# FedAvg reference


@dataclass
class FedAvgResult:
    model: np.ndarray
    history: list


def fedavg_baseline(datasets, config: GDConfig, kind: str = "linreg", local_steps: int = 1,
                    init=None) -> FedAvgResult:
    """Plain FedAvg: local gradient steps on the mean loss, then server averaging.

    ``config.T`` is the number of rounds and ``config.eta`` the local step size.
    """
    data = stack_clients(datasets)
    d = data.d
    w = np.zeros(d) if init is None else np.asarray(init, dtype=float).copy()
    n = np.maximum(data.n_i, 1)
    eta = config.eta
    history = []
    for t in range(1, config.T + 1):
        local = np.tile(w, (data.m, 1))
        for _ in range(local_steps):
            if kind == "linreg":
                _, g, _ = client_loss("linreg", local, data, np.ones(data.m))
            else:
                _, g, _ = client_loss(kind, local, data)
            local = local - eta * (g / n[:, None] + config.weight_decay * local)
        w = local.mean(axis=0)
        eta *= config.decay
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"FedAvg diverged at round {t}", iteration=t)
        if t % config.record_every == 0 or t == config.T:
            history.append({"round": t, "norm": float(np.linalg.norm(w))})
    return FedAvgResult(w, history)
