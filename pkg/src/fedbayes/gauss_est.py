"""Personalized estimation of Gaussian client means."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import GaussianPrior, SyntheticDataset, _as_contract
from .errors import ParameterError
from .privacy import MechanismSpec, apply_mechanism

__all__ = [
    "GaussEstimateReport",
    "shrinkage_weight",
    "personalized_gaussian",
    "theoretical_mse_gaussian",
    "constrained_personalized_gaussian",
    "exact_mse_gaussian",
    "clip_radius_b",
    "van_trees_bound",
    "mse_with_se",
]


def mse_with_se(estimates, truth):
    """Mean over clients of the squared error and its Monte Carlo standard error."""
    err = np.asarray(estimates, dtype=float) - np.asarray(truth, dtype=float)
    per_client = err ** 2 if err.ndim == 1 else np.sum(err ** 2, axis=1)
    m = per_client.size
    se = float(per_client.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
    return float(per_client.mean()), se


@dataclass
class GaussEstimateReport:
    estimates: np.ndarray
    global_estimate: np.ndarray
    a: float
    mse: Optional[float] = None
    mse_se: Optional[float] = None
    theoretical_mse: Optional[float] = None
    mechanism: dict = field(default_factory=lambda: {"kind": "identity"})
    mse_unprojected: Optional[float] = None
    projected_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "mse": self.mse,
            "mse_se": self.mse_se,
            "theoretical_mse": self.theoretical_mse,
            "mse_unprojected": self.mse_unprojected,
            "projected_fraction": self.projected_fraction,
            "mechanism": self.mechanism,
        }


def shrinkage_weight(sigma_theta_sq: float, sigma_x_sq: float, n: int,
                     sigma_q_sq: float = 0.0, m: Optional[int] = None) -> float:
    """Weight on the local mean.

    (s_th + s_q/(m-1)) / (s_th + s_q/(m-1) + s_x/n); with s_q = 0 this is
    s_th / (s_th + s_x/n).
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    if sigma_theta_sq < 0 or sigma_x_sq < 0 or sigma_q_sq < 0:
        raise ParameterError("variances must be >= 0")
    extra = 0.0
    if sigma_q_sq > 0:
        if m is None or m < 2:
            raise ParameterError("a noisy channel needs m >= 2")
        extra = sigma_q_sq / (m - 1)
    num = sigma_theta_sq + extra
    den = num + sigma_x_sq / n
    if den == 0:
        return 0.0
    return float(num / den)


def _means(data) -> np.ndarray:
    if isinstance(data, SyntheticDataset):
        xbar = data.means()
    else:
        xbar = np.asarray(data, dtype=float)
    if xbar.size == 0:
        raise ParameterError("empty dataset")
    if xbar.ndim == 1:
        xbar = xbar[:, None]
    return xbar


def _truth(data, truth):
    if truth is not None:
        return np.asarray(truth, dtype=float)
    if isinstance(data, SyntheticDataset):
        return data.true_params
    return None


def personalized_gaussian(data, a: float, truth=None) -> GaussEstimateReport:
    """theta_hat_i = a * xbar_i + (1 - a) * mean_l xbar_l.

    ``data`` is a SyntheticDataset or an (m, d) array of client means.
    """
    if not 0 <= a <= 1:
        raise ParameterError("a must lie in [0, 1]")
    xbar = _means(data)
    mu_hat = xbar.mean(axis=0)
    est = a * xbar + (1 - a) * mu_hat
    rep = GaussEstimateReport(est, mu_hat, float(a))
    truth = _truth(data, truth)
    if truth is not None:
        rep.mse, rep.mse_se = mse_with_se(est, truth.reshape(est.shape))
    if isinstance(data, SyntheticDataset) and isinstance(data.prior, GaussianPrior):
        rep.theoretical_mse = theoretical_mse_gaussian(data.prior, data.n, data.m, a)
    return rep


def theoretical_mse_gaussian(prior: GaussianPrior, n: int, m: int, a: float) -> float:
    """d s_x / n * ((1 - a)/m + a)."""
    return prior.d * prior.sigma_x_sq / n * ((1 - a) / m + a)


def exact_mse_gaussian(prior: GaussianPrior, n: int, m: int, a: float,
                       sigma_q_sq: float = 0.0) -> float:
    """MSE of the shrinkage estimator for an arbitrary weight ``a``.

    Includes channel noise of variance sigma_q_sq per coordinate in the
    global mean and ignores projection. Equals
    :func:`theoretical_mse_gaussian` at the optimal noiseless weight.
    """
    s = prior.sigma_x_sq / n
    t = prior.sigma_theta_sq
    per_coord = (s * (a * a + 2 * a * (1 - a) / m + (1 - a) ** 2 / m)
                 + t * (1 - a) ** 2 * (m - 1) / m
                 + (1 - a) ** 2 * sigma_q_sq / m)
    return prior.d * per_coord


def clip_radius_b(r: float, sigma_theta: float, sigma_x: float, n: int, m: int) -> float:
    """Projection radius r + (s_th + s_x/sqrt(n)) sqrt(log(m^2 n))."""
    if r < 0 or m * m * n < 1:
        raise ParameterError("need r >= 0 and m^2 n >= 1")
    root = math.sqrt(math.log(m * m * n))
    return r + sigma_theta * root + sigma_x / math.sqrt(n) * root


def constrained_personalized_gaussian(data, mechanism: MechanismSpec, rng,
                                      sigma_theta_sq: Optional[float] = None,
                                      sigma_x_sq: Optional[float] = None,
                                      truth=None) -> GaussEstimateReport:
    """Personalized estimate when clients send their means through a channel.

    Each client projects its mean to [-a, a] per coordinate (a = the
    mechanism range), passes it through the channel and the server averages
    the outputs. The weight accounts for the channel variance.
    """
    if mechanism.kind == "binary_response":
        raise ParameterError("binary_response is a Bernoulli channel")
    xbar = _means(data)
    m, d = xbar.shape
    if isinstance(data, SyntheticDataset):
        prior, n = data.prior, data.n
        sigma_theta_sq = prior.sigma_theta_sq if sigma_theta_sq is None else sigma_theta_sq
        sigma_x_sq = prior.sigma_x_sq if sigma_x_sq is None else sigma_x_sq
        ids = [c.client_id for c in data.clients]
    else:
        raise ParameterError("constrained estimation needs a SyntheticDataset")
    rng = _as_contract(rng)

    if mechanism.kind == "identity":
        sent = xbar.copy()
        projected = np.zeros(m, dtype=bool)
    else:
        b = mechanism.range_half_width
        clipped = np.clip(xbar, -b, b)
        projected = np.any(clipped != xbar, axis=1)
        sent = np.empty_like(clipped)
        for row, cid in enumerate(ids):
            sent[row] = apply_mechanism(mechanism, clipped[row], rng.stream("channel", cid))
    mu_q = sent.mean(axis=0)
    sq = mechanism.sigma_q ** 2
    a = shrinkage_weight(sigma_theta_sq, sigma_x_sq, n, sq, m if sq > 0 else None)
    est = a * xbar + (1 - a) * mu_q
    rep = GaussEstimateReport(est, mu_q, a, mechanism=mechanism.to_dict(),
                              projected_fraction=float(projected.mean()))
    truth = _truth(data, truth)
    if truth is not None:
        truth = truth.reshape(est.shape)
        rep.mse, rep.mse_se = mse_with_se(est, truth)
        keep = ~projected
        if keep.any():
            rep.mse_unprojected = mse_with_se(est[keep], truth[keep])[0]
    if isinstance(prior, GaussianPrior):
        rep.theoretical_mse = exact_mse_gaussian(prior, n, m, a, sq)
    return rep


def van_trees_bound(sigma_theta_sq: float, sigma_x_sq: float, n: int, d: int,
                    m: Optional[int] = None, mode: str = "known_prior") -> float:
    """Bayesian Cramer-Rao (van Trees) lower bound on the per-client MSE."""
    if not (sigma_theta_sq > 0 and sigma_x_sq > 0):
        raise ParameterError("variances must be positive")
    den = n * sigma_theta_sq + sigma_x_sq
    if mode == "known_prior":
        return d * sigma_theta_sq * sigma_x_sq / den
    if mode == "estimated_mean":
        if m is None or m < 1:
            raise ParameterError("estimated_mean mode needs m >= 1")
        return d * (sigma_theta_sq * sigma_x_sq + sigma_x_sq ** 2 / (m * n)) / den
    raise ParameterError(f"unknown mode {mode!r}")
