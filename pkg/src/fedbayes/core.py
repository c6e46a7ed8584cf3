"""Population priors, client datasets and seeded synthetic data generation.

Every sampler draws each client's data from its own substream, keyed by the
master seed, the client id, the round and a purpose tag. Results therefore do
not depend on the order clients are visited in.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ParameterError

__all__ = [
    "RngContract",
    "GaussianPrior",
    "BetaPrior",
    "ScalarPrior",
    "DiscretePrior",
    "GaussianMixturePrior",
    "ClientDataset",
    "SyntheticDataset",
    "sample_gaussian_population",
    "sample_bernoulli_population",
    "sample_mixture_population",
    "sample_regression_population",
    "paper_linreg_prior",
]

_MASK64 = (1 << 64) - 1


def _tag_key(tag: str) -> int:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngContract:
    """Deterministic source of independent random substreams.

    A substream is identified by ``(master_seed, client_id, round, tag)``.
    ``client_id=None`` denotes the server.
    """

    master_seed: int

    def __post_init__(self):
        if not isinstance(self.master_seed, (int, np.integer)) or self.master_seed < 0:
            raise ParameterError("master_seed must be a non-negative integer")
        if int(self.master_seed) > _MASK64:
            raise ParameterError("master_seed must fit in 64 bits")

    def entropy(self, tag: str, client_id: Optional[int] = None, round: int = 0) -> list:
        cid = 0 if client_id is None else int(client_id) + 1
        if cid < 0 or round < 0:
            raise ParameterError("client_id must be >= 0 and round >= 0")
        return [int(self.master_seed), _tag_key(tag), cid, int(round)]

    def stream(self, tag: str, client_id: Optional[int] = None, round: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(self.entropy(tag, client_id, round))
        return np.random.Generator(np.random.PCG64(seq))


def _as_contract(rng) -> RngContract:
    if isinstance(rng, RngContract):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngContract(int(rng))
    raise ParameterError("rng must be an RngContract or an integer seed")


# ---------------------------------------------------------------------------
# Priors


@dataclass(frozen=True)
class GaussianPrior:
    """N(mu, sigma_theta_sq I) population with N(theta, sigma_x_sq I) observations."""

    mu: np.ndarray
    sigma_theta_sq: float
    sigma_x_sq: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if mu.ndim != 1 or mu.size == 0:
            raise ParameterError("mu must be a non-empty vector")
        if not np.all(np.isfinite(mu)):
            raise ParameterError("mu must be finite")
        if not (self.sigma_theta_sq >= 0 and np.isfinite(self.sigma_theta_sq)):
            raise ParameterError("sigma_theta_sq must be >= 0")
        if not (self.sigma_x_sq > 0 and np.isfinite(self.sigma_x_sq)):
            raise ParameterError("sigma_x_sq must be > 0")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma_theta_sq", float(self.sigma_theta_sq))
        object.__setattr__(self, "sigma_x_sq", float(self.sigma_x_sq))

    @property
    def d(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class BetaPrior:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ParameterError("alpha and beta must be positive")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def var(self) -> float:
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1))

    def as_scalar(self) -> "ScalarPrior":
        return ScalarPrior.beta(self.alpha, self.beta)


_SPIKES = np.array([0.25, 0.5, 0.75])


@dataclass(frozen=True)
class ScalarPrior:
    """Distribution of a Bernoulli parameter p in [0, 1]."""

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind == "beta":
            a, b = self.params
            if not (a > 0 and b > 0):
                raise ParameterError("beta prior needs alpha, beta > 0")
        elif self.kind == "clipped_normal":
            mean, sd = self.params
            if not sd > 0:
                raise ParameterError("clipped_normal sd must be > 0")
        elif self.kind in ("three_spike", "uniform"):
            if self.params:
                raise ParameterError(f"{self.kind} prior takes no parameters")
        else:
            raise ParameterError(f"unknown scalar prior kind {self.kind!r}")

    @classmethod
    def beta(cls, alpha: float, beta: float) -> "ScalarPrior":
        return cls("beta", (float(alpha), float(beta)))

    @classmethod
    def three_spike(cls) -> "ScalarPrior":
        return cls("three_spike")

    @classmethod
    def uniform(cls) -> "ScalarPrior":
        return cls("uniform")

    @classmethod
    def clipped_normal(cls, mean: float = 0.5, sd: float = 0.15) -> "ScalarPrior":
        return cls("clipped_normal", (float(mean), float(sd)))

    def _truncnorm(self):
        mean, sd = self.params
        return stats.truncnorm((0.0 - mean) / sd, (1.0 - mean) / sd, loc=mean, scale=sd)

    @property
    def mean(self) -> float:
        if self.kind == "beta":
            a, b = self.params
            return a / (a + b)
        if self.kind in ("three_spike", "uniform"):
            return 0.5
        return float(self._truncnorm().mean())

    @property
    def var(self) -> float:
        if self.kind == "beta":
            a, b = self.params
            s = a + b
            return a * b / (s * s * (s + 1))
        if self.kind == "three_spike":
            return float(np.var(_SPIKES))
        if self.kind == "uniform":
            return 1.0 / 12.0
        return float(self._truncnorm().var())

    def sample(self, gen: np.random.Generator, size=None):
        if self.kind == "beta":
            return gen.beta(self.params[0], self.params[1], size=size)
        if self.kind == "three_spike":
            return _SPIKES[gen.integers(0, 3, size=size)]
        if self.kind == "uniform":
            return gen.uniform(0.0, 1.0, size=size)
        # rejection sampling keeps the truncated-normal shape
        mean, sd = self.params
        shape = () if size is None else size
        out = np.empty(shape).ravel()
        todo = np.arange(out.size)
        while todo.size:
            draw = gen.normal(mean, sd, size=todo.size)
            ok = (draw >= 0.0) & (draw <= 1.0)
            out[todo[ok]] = draw[ok]
            todo = todo[~ok]
        return out.reshape(shape) if size is not None else float(out[0])


@dataclass(frozen=True)
class DiscretePrior:
    """theta takes value centers[l] with probability probs[l]."""

    probs: np.ndarray
    centers: np.ndarray
    radius_r: Optional[float] = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).ravel()
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim == 1:
            centers = centers[:, None]
        if probs.size == 0 or centers.shape[0] != probs.size:
            raise ParameterError("probs and centers must have the same nonzero length")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ParameterError("probs must be nonnegative and sum to 1")
        norms = np.linalg.norm(centers, axis=1)
        r = float(norms.max()) if self.radius_r is None else float(self.radius_r)
        if r < 0 or np.any(norms > r * (1 + 1e-12) + 1e-12):
            raise ParameterError("all centers must lie within radius_r")
        probs.setflags(write=False)
        centers.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radius_r", r)

    @property
    def k(self) -> int:
        return self.probs.size

    @property
    def d(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class GaussianMixturePrior:
    probs: np.ndarray
    centers: np.ndarray
    component_sds: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).ravel()
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        sds = np.asarray(self.component_sds, dtype=float).ravel()
        if not (probs.size == centers.shape[0] == sds.size) or probs.size == 0:
            raise ParameterError("probs, centers and component_sds must agree in length")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ParameterError("probs must be nonnegative and sum to 1")
        if np.any(sds <= 0):
            raise ParameterError("component sds must be positive")
        for arr in (probs, centers, sds):
            arr.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "component_sds", sds)

    @property
    def k(self) -> int:
        return self.probs.size

    @property
    def d(self) -> int:
        return self.centers.shape[1]


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class ClientDataset:
    """Local samples of one client.

    ``x`` has shape (n, d) for vector observations and features, or (n,) for
    Bernoulli bits. ``y`` holds responses or class indices when present.
    """

    client_id: int
    x: np.ndarray
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.array(self.x)
        if x.ndim == 0 or x.shape[0] < 1:
            raise ParameterError("a client needs n >= 1 samples")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = np.array(self.y)
            if y.shape[0] != x.shape[0]:
                raise ParameterError("x and y must have the same number of samples")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def z(self) -> int:
        """Number of ones, for Bernoulli clients."""
        return int(self.x.sum())

    def mean(self):
        return self.x.mean(axis=0)


@dataclass(frozen=True)
class SyntheticDataset:
    prior: object
    true_params: np.ndarray
    clients: tuple
    labels: Optional[np.ndarray] = None
    sigma_x_sq: Optional[float] = None

    def __post_init__(self):
        if len(self.clients) != len(self.true_params):
            raise ParameterError("true_params and clients must have length m")

    @property
    def m(self) -> int:
        return len(self.clients)

    @property
    def n(self) -> int:
        return self.clients[0].n

    def means(self) -> np.ndarray:
        """Per-client sample means, shape (m, d) or (m,) for scalar data."""
        return np.stack([c.x.mean(axis=0) for c in self.clients])

    def sums(self) -> np.ndarray:
        return np.array([c.z for c in self.clients])

    def stacked(self):
        """(X, Y) arrays of shape (m, n, d) and (m, n) for equal-size clients."""
        X = np.stack([c.x for c in self.clients]).astype(float)
        Y = None if self.clients[0].y is None else np.stack([c.y for c in self.clients])
        return X, Y


def _client_ids(m: int, client_ids) -> np.ndarray:
    if m < 1:
        raise ParameterError("m must be >= 1")
    ids = np.arange(m) if client_ids is None else np.asarray(client_ids, dtype=int)
    if ids.shape != (m,):
        raise ParameterError("client_ids must have length m")
    return ids


def sample_gaussian_population(prior: GaussianPrior, m: int, n: int, rng,
                               client_ids: Optional[Sequence[int]] = None) -> SyntheticDataset:
    """theta_i ~ N(mu, s_th I), X_ij ~ N(theta_i, s_x I)."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = _as_contract(rng)
    ids = _client_ids(m, client_ids)
    sd_t, sd_x = np.sqrt(prior.sigma_theta_sq), np.sqrt(prior.sigma_x_sq)
    thetas, clients = [], []
    for cid in ids:
        g = rng.stream("gaussian-population", int(cid))
        theta = prior.mu + sd_t * g.standard_normal(prior.d)
        x = theta + sd_x * g.standard_normal((n, prior.d))
        thetas.append(theta)
        clients.append(ClientDataset(int(cid), x))
    return SyntheticDataset(prior, np.array(thetas), tuple(clients), sigma_x_sq=prior.sigma_x_sq)


def sample_bernoulli_population(prior, m: int, n: int, rng,
                                client_ids: Optional[Sequence[int]] = None) -> SyntheticDataset:
    """p_i ~ prior, X_ij ~ Bern(p_i). Client sums are available via ``sums()``."""
    if isinstance(prior, BetaPrior):
        prior = prior.as_scalar()
    if not isinstance(prior, ScalarPrior):
        raise ParameterError("Bernoulli populations need a ScalarPrior or BetaPrior")
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = _as_contract(rng)
    ids = _client_ids(m, client_ids)
    ps, clients = [], []
    for cid in ids:
        g = rng.stream("bernoulli-population", int(cid))
        p = float(prior.sample(g))
        bits = (g.random(n) < p).astype(np.int8)
        ps.append(p)
        clients.append(ClientDataset(int(cid), bits))
    return SyntheticDataset(prior, np.array(ps), tuple(clients))


def sample_mixture_population(prior: DiscretePrior, m: int, n: int, sigma_x_sq: float, rng,
                              client_ids: Optional[Sequence[int]] = None) -> SyntheticDataset:
    """theta_i = centers[l] with probability probs[l]; X_ij ~ N(theta_i, s_x I)."""
    if not sigma_x_sq > 0:
        raise ParameterError("sigma_x_sq must be > 0")
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = _as_contract(rng)
    ids = _client_ids(m, client_ids)
    cdf = np.cumsum(prior.probs)
    cdf[-1] = 1.0
    sd_x = np.sqrt(sigma_x_sq)
    labels, thetas, clients = [], [], []
    for cid in ids:
        g = rng.stream("mixture-population", int(cid))
        label = int(np.searchsorted(cdf, g.random(), side="right"))
        label = min(label, prior.k - 1)
        while prior.probs[label] == 0:  # guard against float ties at the cdf edges
            label -= 1
        theta = prior.centers[label]
        x = theta + sd_x * g.standard_normal((n, prior.d))
        labels.append(label)
        thetas.append(theta)
        clients.append(ClientDataset(int(cid), x))
    return SyntheticDataset(prior, np.array(thetas), tuple(clients),
                            labels=np.array(labels), sigma_x_sq=float(sigma_x_sq))


def sample_regression_population(prior: GaussianPrior, m: int, n: int, feature_sd: float, rng,
                                 client_ids: Optional[Sequence[int]] = None) -> SyntheticDataset:
    """Y_i = X_i theta_i + w_i with X entries ~ N(0, feature_sd^2) and w_i ~ N(0, s_x I)."""
    if not feature_sd > 0:
        raise ParameterError("feature_sd must be > 0")
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = _as_contract(rng)
    ids = _client_ids(m, client_ids)
    sd_t, sd_x = np.sqrt(prior.sigma_theta_sq), np.sqrt(prior.sigma_x_sq)
    thetas, clients = [], []
    for cid in ids:
        g = rng.stream("regression-population", int(cid))
        theta = prior.mu + sd_t * g.standard_normal(prior.d)
        x = feature_sd * g.standard_normal((n, prior.d))
        y = x @ theta + sd_x * g.standard_normal(n)
        thetas.append(theta)
        clients.append(ClientDataset(int(cid), x, y))
    return SyntheticDataset(prior, np.array(thetas), tuple(clients), sigma_x_sq=prior.sigma_x_sq)


def paper_linreg_prior(d: int, rng, mu_sd: float = 0.1,
                       sigma_theta_sq: float = 0.01, sigma_x_sq: float = 0.05) -> GaussianPrior:
    """Gaussian prior of the synthetic regression experiment with a random mean."""
    g = _as_contract(rng).stream("linreg-mu")
    return GaussianPrior(mu_sd * g.standard_normal(d), sigma_theta_sq, sigma_x_sq)
