"""Personalized estimation of Bernoulli client parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import SyntheticDataset, _as_contract
from .errors import ParameterError
from .gauss_est import mse_with_se
from .privacy import binary_response

__all__ = [
    "VAR_FLOOR",
    "KnownPriorMse",
    "MomentEstimates",
    "BernEstimateReport",
    "posterior_mean_known",
    "mse_known",
    "moment_weights",
    "personalized_bernoulli",
    "private_personalized_bernoulli",
    "thm3_bound",
    "thm4_bound",
]

VAR_FLOOR = 1e-12


class KnownPriorMse(NamedTuple):
    mse: float
    local_mse: float
    gain_factor: float


@dataclass
class MomentEstimates:
    mu_hat: np.ndarray
    sigma_hat_sq: np.ndarray
    a_hat: np.ndarray


@dataclass
class BernEstimateReport:
    estimates: np.ndarray
    moments: MomentEstimates
    mse: Optional[float] = None
    mse_se: Optional[float] = None
    local_mse: Optional[float] = None
    local_mse_se: Optional[float] = None
    epsilon0: Optional[float] = None

    @property
    def gain(self) -> Optional[float]:
        """1 - MSE_personalized / MSE_local."""
        if self.mse is None or not self.local_mse:
            return None
        return 1.0 - self.mse / self.local_mse

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "mse_se": self.mse_se,
            "local_mse": self.local_mse,
            "local_mse_se": self.local_mse_se,
            "gain": self.gain,
            "mean_a_hat": float(np.mean(self.moments.a_hat)),
            "epsilon0": self.epsilon0,
        }


def posterior_mean_known(alpha: float, beta: float, n: int, z):
    """Posterior mean (alpha + Z) / (alpha + beta + n) under a Beta prior."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0) or np.any(z > n):
        raise ParameterError("Z must lie in [0, n]")
    out = (alpha + z) / (alpha + beta + n)
    return out if out.ndim else float(out)


def mse_known(alpha: float, beta: float, n: int) -> KnownPriorMse:
    """MSE of the posterior mean, MSE of Z/n, and their ratio n/(alpha+beta+n)."""
    if not (alpha > 0 and beta > 0):
        raise ParameterError("alpha and beta must be positive")
    s = alpha + beta
    local = alpha * beta / (n * s * (s + 1))
    factor = n / (s + n)
    return KnownPriorMse(local * factor, local, factor)


def _leave_one_out(values: np.ndarray):
    m = values.size
    if m < 3:
        raise ParameterError("moment estimation needs m >= 3 clients")
    centre = values.mean()
    y = values - centre  # centring keeps the one-pass sums well conditioned
    s1, s2 = y.sum(), np.dot(y, y)
    mu_y = (s1 - y) / (m - 1)
    ss = (s2 - y * y) - (m - 1) * mu_y ** 2
    var = np.maximum(ss / (m - 2), VAR_FLOOR)
    return mu_y + centre, var


def _weights(mu_hat, var, n, minus_one: bool):
    mu_c = np.clip(mu_hat, 0.0, 1.0)
    ratio = mu_c * (1 - mu_c) / var
    den = ratio + n - (1.0 if minus_one else 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(den > 0, n / den, 1.0)
    return np.clip(a, 0.0, 1.0)


def moment_weights(xbar, n: int, i: Optional[int] = None) -> MomentEstimates:
    """Leave-self-out moment estimates and the resulting local weights.

    mu_i is the mean of the other clients' means and s_i their spread
    around mu_i (divided by m - 2). The weight is
    a_i = n / (mu_i (1 - mu_i) / s_i - 1 + n), clamped to [0, 1].
    """
    xbar = np.asarray(xbar, dtype=float).ravel()
    mu, var = _leave_one_out(xbar)
    a = _weights(mu, var, n, minus_one=True)
    if i is not None:
        return MomentEstimates(mu[i:i + 1], var[i:i + 1], a[i:i + 1])
    return MomentEstimates(mu, var, a)


def _unpack(data, n, truth):
    if isinstance(data, SyntheticDataset):
        xbar = data.sums() / data.n
        return xbar, data.n, data.true_params if truth is None else np.asarray(truth), data
    if n is None:
        raise ParameterError("n is required when passing raw client means")
    return np.asarray(data, dtype=float).ravel(), int(n), truth, None


def _finish(est, moments, xbar, truth, eps=None) -> BernEstimateReport:
    rep = BernEstimateReport(est, moments, epsilon0=eps)
    if truth is not None:
        truth = np.asarray(truth, dtype=float).ravel()
        rep.mse, rep.mse_se = mse_with_se(est, truth)
        rep.local_mse, rep.local_mse_se = mse_with_se(xbar, truth)
    return rep


def personalized_bernoulli(data, n: Optional[int] = None, truth=None) -> BernEstimateReport:
    """p_i = a_i xbar_i + (1 - a_i) mu_i with leave-self-out moment estimates."""
    xbar, n, truth, _ = _unpack(data, n, truth)
    if n < 1:
        raise ParameterError("n must be >= 1")
    mom = moment_weights(xbar, n)
    est = np.clip(mom.a_hat * xbar + (1 - mom.a_hat) * mom.mu_hat, 0.0, 1.0)
    return _finish(est, mom, xbar, truth)


def private_personalized_bernoulli(data, epsilon0: float, rng, n: Optional[int] = None,
                                   truth=None, client_ids=None) -> BernEstimateReport:
    """Personalized estimate when clients publish their means via binary response.

    Moments come from the privatized values; the weight is
    n / (mu (1 - mu) / s + n) with mu projected to [0, 1].
    """
    xbar, n, truth, ds = _unpack(data, n, truth)
    rng = _as_contract(rng)
    if ds is not None:
        ids = [c.client_id for c in ds.clients]
    else:
        ids = range(xbar.size) if client_ids is None else client_ids
    priv = np.array([binary_response(x, epsilon0, rng.stream("binary-response", int(cid)))
                     for x, cid in zip(xbar, ids)])
    mu, var = _leave_one_out(priv)
    mu = np.clip(mu, 0.0, 1.0)
    a = _weights(mu, var, n, minus_one=False)
    mom = MomentEstimates(mu, var, a)
    est = np.clip(a * xbar + (1 - a) * mu, 0.0, 1.0)
    return _finish(est, mom, xbar, truth, eps=float(epsilon0))


def thm3_bound(alpha: float, beta: float, n: int, m: int, mean_a_sq: float,
               mean_one_minus_a_sq: float) -> float:
    """Upper bound on the MSE of the moment-based estimator under a Beta prior."""
    s = alpha + beta
    local = alpha * beta / (n * s * (s + 1))
    prior_var = alpha * beta / (s * s * (s + 1))
    extra = 3.0 * math.log(4 * m * m * n) / (m - 1)
    return mean_a_sq * local + mean_one_minus_a_sq * (prior_var + extra)


def thm4_bound(alpha: float, beta: float, n: int, m: int, epsilon0: float,
               mean_a_sq: float, mean_one_minus_a_sq: float) -> float:
    """Upper bound on the MSE of the binary-response estimator under a Beta prior."""
    s = alpha + beta
    local = alpha * beta / (n * s * (s + 1))
    prior_var = alpha * beta / (s * s * (s + 1))
    e = math.exp(epsilon0)
    lg = math.log(4 * m * m * n)
    extra = (e + 1) ** 2 * lg / (3 * (e - 1) ** 2 * (m - 1))
    return mean_a_sq * local + mean_one_minus_a_sq * (prior_var + extra)
