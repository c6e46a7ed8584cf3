"""Estimation under a discrete (finite mixture) prior on client parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .core import DiscretePrior, SyntheticDataset, _as_contract
from .errors import ParameterError
from .privacy import MechanismSpec, stochastic_quantizer

__all__ = [
    "ClusterModel",
    "AltMinResult",
    "posterior_weights",
    "posterior_weights_from_means",
    "posterior_mean_mixture",
    "lloyd_cluster",
    "alt_min_estimation",
    "concentration_radius",
    "match_centers",
    "trajectory_rows",
]


def _log_weights_to_probs(logw: np.ndarray) -> np.ndarray:
    return np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))


def posterior_weights(x, prior: DiscretePrior, sigma_x_sq: float) -> np.ndarray:
    """Posterior probability of each center given one client's samples.

    w_l is proportional to p_l exp(-sum_j ||x_j - mu_l||^2 / (2 s_x)).
    """
    if not sigma_x_sq > 0:
        raise ParameterError("sigma_x_sq must be > 0")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if prior.d == 1 else x[None, :]
    with np.errstate(divide="ignore"):
        logp = np.log(prior.probs)
    if not np.any(np.isfinite(logp)):
        raise ParameterError("all mixture probabilities are zero")
    sq = ((x[:, None, :] - prior.centers[None, :, :]) ** 2).sum(axis=(0, 2))
    return _log_weights_to_probs(logp - sq / (2.0 * sigma_x_sq))


def posterior_weights_from_means(xbar, n: int, probs, centers, sigma_x_sq: float) -> np.ndarray:
    """Batched posterior weights from client means, shape (m, k).

    Uses sum_j ||x_j - mu||^2 = const + n ||xbar - mu||^2, which leaves the
    normalized weights unchanged.
    """
    xbar = np.atleast_2d(np.asarray(xbar, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(probs, dtype=float))
    if not np.any(np.isfinite(logp)):
        raise ParameterError("all mixture probabilities are zero")
    sq = ((xbar[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return _log_weights_to_probs(logp[None, :] - n * sq / (2.0 * sigma_x_sq))


def posterior_mean_mixture(weights, centers) -> np.ndarray:
    """Convex combination sum_l w_l mu_l (rows of ``weights`` for several clients)."""
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers[:, None]
    return np.asarray(weights, dtype=float) @ centers


@dataclass
class ClusterModel:
    centers: np.ndarray
    probs: np.ndarray
    assignment: np.ndarray
    inertia: float
    inertia_history: List[float] = field(default_factory=list)


def _sq_dists(points, centers):
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(points, k, gen):
    m = points.shape[0]
    chosen = [int(gen.integers(m))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(gen.choice(m, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(m), chosen)
            idx = int(gen.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _lloyd_once(points, k, gen, max_iters):
    centers = _kmeanspp(points, k, gen)
    assign = np.full(points.shape[0], -1)
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(points, centers)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(points.shape[0]), new].sum()))
        if np.array_equal(new, assign):
            break
        assign = new
        for l in range(k):
            members = assign == l
            if members.any():
                centers[l] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(points.shape[0]), assign]))
                centers[l] = points[far]
                assign[far] = l
    d2 = _sq_dists(points, centers)
    inertia = float(d2[np.arange(points.shape[0]), assign].sum())
    history.append(inertia)
    return centers, assign, inertia, history


def lloyd_cluster(points, k: int, rng, max_iters: int = 100, n_init: int = 1) -> ClusterModel:
    """Lloyd's k-means with k-means++ seeding.

    ``rng`` is a numpy Generator. With ``n_init > 1`` the restart with the
    lowest inertia is kept. An empty cluster is reseeded at the point
    farthest from its current center.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    m = points.shape[0]
    if not 1 <= k <= m:
        raise ParameterError("need 1 <= k <= number of points")
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd_once(points, k, rng, max_iters)
        if best is None or run[2] < best[2]:
            best = run
    centers, assign, inertia, history = best
    probs = np.bincount(assign, minlength=k) / m
    return ClusterModel(centers, probs, assign, inertia, history)


def concentration_radius(d: int, sigma_x_sq: float, n: int, m: int, r: float) -> float:
    """4 sqrt(d s_x / n) + 2 sqrt(log(m^2 n) s_x / n) + r."""
    if r < 0:
        raise ParameterError("r must be >= 0")
    return (4.0 * math.sqrt(d * sigma_x_sq / n)
            + 2.0 * math.sqrt(math.log(m * m * n) * sigma_x_sq / n) + r)


@dataclass
class AltMinResult:
    estimates: np.ndarray
    trajectory: List[ClusterModel]
    weights: np.ndarray


def alt_min_estimation(data, k: int, T: int, sigma_x_sq: float, rng,
                       channel: Optional[MechanismSpec] = None, r: float = 0.0,
                       n_init: int = 5, max_iters: int = 100) -> AltMinResult:
    """Alternate server clustering and client posterior-mean updates.

    Clients start from their sample means. Each round the server clusters
    the current estimates and clients recompute their posterior means under
    the clustered prior. With ``channel`` set to a quantizer, uploads are
    first clipped to the concentration radius and then quantized.
    """
    if isinstance(data, SyntheticDataset):
        xbar, n = data.means(), data.n
        ids = [c.client_id for c in data.clients]
    else:
        raise ParameterError("alt_min_estimation needs a SyntheticDataset")
    if xbar.ndim == 1:
        xbar = xbar[:, None]
    m, d = xbar.shape
    if not 1 <= k <= m or T < 1:
        raise ParameterError("need 1 <= k <= m and T >= 1")
    rng = _as_contract(rng)
    theta = xbar.copy()
    trajectory, weights = [], None
    radius = None
    if channel is not None and channel.kind != "identity":
        if channel.kind != "quantizer":
            raise ParameterError("only a quantizer channel is supported here")
        radius = concentration_radius(d, sigma_x_sq, n, m, r)
    for t in range(1, T + 1):
        upload = theta
        if radius is not None:
            upload = np.empty_like(theta)
            for row, cid in enumerate(ids):
                v = theta[row]
                norm = np.linalg.norm(v)
                if norm > radius:
                    v = v * (radius / norm)
                a = channel.a
                v = np.clip(v, -a, a)
                upload[row] = stochastic_quantizer(v, channel.bits, a, rng.stream("upload", cid, t))
        model = lloyd_cluster(upload, k, rng.stream("cluster", None, t), max_iters, n_init)
        trajectory.append(model)
        weights = posterior_weights_from_means(xbar, n, model.probs, model.centers, sigma_x_sq)
        theta = posterior_mean_mixture(weights, model.centers)
    return AltMinResult(theta, trajectory, weights)


def match_centers(estimated, truth):
    """Hungarian matching of estimated to true centers.

    Returns the permutation ``perm`` with estimated[perm[l]] matched to
    truth[l] and the largest matched Euclidean distance.
    """
    est = np.atleast_2d(np.asarray(estimated, dtype=float))
    tru = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape[1] != tru.shape[1]:
        est, tru = est.T, tru.T
    cost = np.sqrt(_sq_dists(tru, est))
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(tru.shape[0], dtype=int)
    perm[rows] = cols
    return perm, float(cost[rows, cols].max())


def trajectory_rows(trajectory: List[ClusterModel]):
    """Rows (round, center_idx, coordinates, prob) for CSV export."""
    rows = []
    for t, model in enumerate(trajectory, start=1):
        for l, (c, p) in enumerate(zip(model.centers, model.probs)):
            rows.append((t, l, " ".join(repr(float(v)) for v in c), float(p)))
    return rows
