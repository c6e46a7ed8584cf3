"""Adaptive personalization via distillation, with and without differential privacy.

Each client trains a personalized classifier theta_i with the loss

    f_i(theta) + 0.5 log(2 psi) + KL(p_mu || p_theta) / (2 psi)

where mu is a global model and psi an adaptive weight shared through the
server. Models are small numpy classifiers with analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy import special, stats

from .core import ClientDataset, _as_contract
from .errors import DivergenceError, ParameterError
from .privacy import ClipSpec, RdpCurve, adaped_rdp_curve, clip

__all__ = [
    "Classifier",
    "cross_entropy",
    "kd_loss",
    "local_objective",
    "psi_gradient",
    "AdaPedConfig",
    "DpAdaPedConfig",
    "AdaPedState",
    "AdaPedResult",
    "adaped_run",
    "adaped_finetune_run",
    "dp_adaped_run",
    "local_only_run",
    "fedavg_classifier",
    "accuracy",
    "synthetic_classification_tasks",
    "KdPopulationDensity",
    "kd_population_density",
]


# ---------------------------------------------------------------------------
# Models


@dataclass(frozen=True)
class Classifier:
    """Linear-softmax or one-hidden-layer (tanh) classifier on flat parameters."""

    d_in: int
    classes: int
    hidden: Optional[int] = None

    def __post_init__(self):
        if self.d_in < 1 or self.classes < 2:
            raise ParameterError("need d_in >= 1 and classes >= 2")
        if self.hidden is not None and self.hidden < 1:
            raise ParameterError("hidden width must be >= 1")

    @property
    def architecture(self) -> str:
        return "linear-softmax" if self.hidden is None else "one-hidden-layer"

    @property
    def shapes(self):
        if self.hidden is None:
            return [(self.classes, self.d_in), (self.classes,)]
        return [(self.hidden, self.d_in), (self.hidden,), (self.classes, self.hidden), (self.classes,)]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, params):
        out, pos = [], 0
        for s in self.shapes:
            size = int(np.prod(s))
            out.append(params[pos:pos + size].reshape(s))
            pos += size
        return out

    def init_params(self, gen: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        if self.hidden is None:
            return np.zeros(self.n_params)
        return scale * gen.standard_normal(self.n_params)

    def forward(self, params, X):
        X = np.atleast_2d(X)
        if self.hidden is None:
            W, b = self.unpack(params)
            return X @ W.T + b, (X,)
        W1, b1, W2, b2 = self.unpack(params)
        H = np.tanh(X @ W1.T + b1)
        return H @ W2.T + b2, (X, H)

    def backward(self, params, cache, dlogits) -> np.ndarray:
        """Gradient wrt the flat parameters given dLoss/dlogits."""
        if self.hidden is None:
            (X,) = cache
            return np.concatenate([(dlogits.T @ X).ravel(), dlogits.sum(axis=0)])
        X, H = cache
        _, _, W2, _ = self.unpack(params)
        dH = (dlogits @ W2) * (1 - H * H)
        return np.concatenate([(dH.T @ X).ravel(), dH.sum(axis=0),
                               (dlogits.T @ H).ravel(), dlogits.sum(axis=0)])

    def log_probs(self, params, X):
        logits, _ = self.forward(params, X)
        return special.log_softmax(logits, axis=1)

    def probs(self, params, X):
        return np.exp(self.log_probs(params, X))

    def predict(self, params, X):
        logits, _ = self.forward(params, X)
        return np.argmax(logits, axis=1)


def _check_batch(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ParameterError("empty batch")
    return X


def cross_entropy(model: Classifier, params, X, y):
    """Mean cross-entropy over the batch and its gradient."""
    X = _check_batch(X)
    y = np.asarray(y, dtype=int)
    logits, cache = model.forward(params, X)
    logp = special.log_softmax(logits, axis=1)
    B = X.shape[0]
    val = -float(np.mean(logp[np.arange(B), y]))
    dlogits = np.exp(logp)
    dlogits[np.arange(B), y] -= 1.0
    return val, model.backward(params, cache, dlogits / B)


def kd_loss(model: Classifier, theta, mu, X, direction: str = "forward"):
    """Batch-mean KL divergence between the predictive distributions.

    ``forward`` is KL(p_mu || p_theta), ``reverse`` is KL(p_theta || p_mu).
    Returns (value, grad wrt theta, grad wrt mu).
    """
    X = _check_batch(X)
    B = X.shape[0]
    lt, ct = model.forward(theta, X)
    lm, cm = model.forward(mu, X)
    logp_t = special.log_softmax(lt, axis=1)
    logp_m = special.log_softmax(lm, axis=1)
    if direction == "forward":
        p, logp, logq, cp, cq, par_p, par_q = np.exp(logp_m), logp_m, logp_t, cm, ct, mu, theta
    elif direction == "reverse":
        p, logp, logq, cp, cq, par_p, par_q = np.exp(logp_t), logp_t, logp_m, ct, cm, theta, mu
    else:
        raise ParameterError("direction must be 'forward' or 'reverse'")
    q = np.exp(logq)
    diff = logp - logq
    kl = np.sum(p * diff, axis=1)
    val = float(np.mean(kl))
    # d KL(p||q) / d logits_q = q - p ; d / d logits_p = p * (log p - log q - KL)
    d_q = (q - p) / B
    d_p = p * (diff - kl[:, None]) / B
    g_q = model.backward(par_q, cq, d_q)
    g_p = model.backward(par_p, cp, d_p)
    if direction == "forward":
        return max(val, 0.0), g_q, g_p
    return max(val, 0.0), g_p, g_q


def local_objective(model: Classifier, theta, mu, psi: float, X, y, direction: str = "forward") -> float:
    """f_i(theta) + 0.5 log(2 psi) + f_KD(theta, mu) / (2 psi)."""
    if not psi > 0:
        raise ParameterError("psi must be positive")
    f, _ = cross_entropy(model, theta, X, y)
    kd, _, _ = kd_loss(model, theta, mu, X, direction)
    return f + 0.5 * math.log(2 * psi) + kd / (2 * psi)


def psi_gradient(psi: float, f_kd: float) -> float:
    """d/dpsi of 0.5 log(2 psi) + f_kd / (2 psi)."""
    if not psi > 0:
        raise ParameterError("psi must be positive")
    return 1.0 / (2 * psi) - f_kd / (2 * psi * psi)


# ---------------------------------------------------------------------------
# Configuration and state


@dataclass(frozen=True)
class AdaPedConfig:
    T: int = 300
    tau: int = 5
    eta1: float = 0.1
    eta2: float = 0.1
    eta3: float = 0.03
    K: Optional[int] = None
    psi0: float = 4.0
    psi_floor: float = 0.5
    batch_size: Optional[int] = None
    kd_direction: str = "forward"
    use_kd: bool = True
    decay: float = 1.0
    weight_decay: float = 0.0
    finetune_cap: Optional[int] = None
    record_every: int = 1

    def __post_init__(self):
        if self.T < 1 or self.tau < 1:
            raise ParameterError("T and tau must be >= 1")
        if not (self.eta1 > 0 and self.eta2 >= 0 and self.eta3 >= 0):
            raise ParameterError("learning rates must be positive")
        if not (self.psi_floor > 0 and self.psi0 >= self.psi_floor):
            raise ParameterError("need psi0 >= psi_floor > 0")
        if self.kd_direction not in ("forward", "reverse"):
            raise ParameterError("kd_direction must be 'forward' or 'reverse'")

    @classmethod
    def paper(cls, **overrides) -> "AdaPedConfig":
        """Step sizes 0.1 / 0.1 / 0.03 with psi floor 0.5."""
        return cls(**{**dict(eta1=0.1, eta2=0.1, eta3=0.03, psi_floor=0.5, psi0=4.0), **overrides})


@dataclass(frozen=True)
class DpAdaPedConfig:
    clip: ClipSpec = ClipSpec()
    sigma_q1: float = 1.0
    sigma_q2: float = 1.0

    def __post_init__(self):
        if self.sigma_q1 < 0 or self.sigma_q2 < 0:
            raise ParameterError("noise scales must be >= 0")


@dataclass
class AdaPedState:
    theta: np.ndarray
    mu_local: np.ndarray
    psi_local: np.ndarray
    mu: np.ndarray
    psi: float
    sampled: np.ndarray
    last_sync: np.ndarray
    t: int = 0


@dataclass
class AdaPedResult:
    state: AdaPedState
    history: List[dict] = field(default_factory=list)
    accuracy: Optional[np.ndarray] = None
    rdp: Optional[RdpCurve] = None
    max_clipped_norm: float = 0.0

    @property
    def mean_accuracy(self) -> Optional[float]:
        return None if self.accuracy is None else float(np.mean(self.accuracy))

    def psi_rows(self):
        """Rows (round, "server", "psi", value)."""
        return [(h["t"], "server", "psi", h["psi"]) for h in self.history]


def _pairs(datasets):
    out = []
    for ds in datasets:
        if isinstance(ds, ClientDataset):
            out.append((np.asarray(ds.x, dtype=float), np.asarray(ds.y, dtype=int)))
        else:
            x, y = ds
            out.append((np.asarray(x, dtype=float), np.asarray(y, dtype=int)))
    return out


def accuracy(model: Classifier, params, X, y) -> float:
    return float(np.mean(model.predict(params, X) == np.asarray(y)))


def _eval(model, thetas, test):
    if test is None:
        return None
    return np.array([accuracy(model, th, x, y) for th, (x, y) in zip(thetas, _pairs(test))])


def _batch(gen, x, y, size):
    if size is None or size >= x.shape[0]:
        return x, y
    idx = gen.choice(x.shape[0], size=size, replace=False)
    return x[idx], y[idx]


# ---------------------------------------------------------------------------
# Training loops


def _run(train, config: AdaPedConfig, rng, model: Classifier, test=None,
         dp: Optional[DpAdaPedConfig] = None, finetune: bool = False) -> AdaPedResult:
    data = _pairs(train)
    m = len(data)
    K = m if config.K is None else config.K
    if not 1 <= K <= m:
        raise ParameterError("need 1 <= K <= m")
    rng = _as_contract(rng)
    D = model.n_params
    init = model.init_params(rng.stream("adaped-init"))
    st = AdaPedState(
        theta=np.tile(init, (m, 1)), mu_local=np.tile(init, (m, 1)),
        psi_local=np.full(m, float(config.psi0)), mu=init.copy(), psi=float(config.psi0),
        sampled=np.arange(m), last_sync=np.zeros(m, dtype=int))
    res = AdaPedResult(st)
    eta1, eta2, eta3 = config.eta1, config.eta2, config.eta3
    floor = config.psi_floor
    kd_on = config.use_kd
    direction = config.kd_direction
    unsynced = np.zeros(m, dtype=int)

    for t in range(config.T):
        if t % config.tau == 0:
            gen = rng.stream("adaped-sample", None, t)
            st.sampled = np.sort(gen.choice(m, size=K, replace=False))
            st.mu_local[st.sampled] = st.mu
            st.psi_local[st.sampled] = st.psi
            st.last_sync[st.sampled] = t
            unsynced[st.sampled] = 0
        in_k = np.zeros(m, dtype=bool)
        in_k[st.sampled] = True

        if finetune:
            cap = config.finetune_cap
            for i in np.flatnonzero(~in_k):
                if cap is not None and unsynced[i] >= cap:
                    continue
                x, y = _batch(rng.stream("adaped-batch", i, t), *data[i], config.batch_size)
                _, g = cross_entropy(model, st.theta[i], x, y)
                if kd_on:
                    _, g_kd, _ = kd_loss(model, st.theta[i], st.mu_local[i], x, direction)
                    g = g + g_kd / (2 * st.psi_local[i])
                st.theta[i] = st.theta[i] - eta1 * (g + config.weight_decay * st.theta[i])
                unsynced[i] += 1

        for i in st.sampled:
            x, y = _batch(rng.stream("adaped-batch", i, t), *data[i], config.batch_size)
            psi_i = st.psi_local[i]
            _, g = cross_entropy(model, st.theta[i], x, y)
            if kd_on:
                _, g_kd, _ = kd_loss(model, st.theta[i], st.mu_local[i], x, direction)
                g = g + g_kd / (2 * psi_i)
            theta_new = st.theta[i] - eta1 * (g + config.weight_decay * st.theta[i])
            st.theta[i] = theta_new
            if not kd_on:
                continue
            _, _, g_mu = kd_loss(model, theta_new, st.mu_local[i], x, direction)
            h = g_mu / (2 * psi_i)
            if dp is not None and dp.clip.mode == "joint":
                # both gradients must exist before the joint clip, so the psi
                # gradient uses the noiseless mu step
                kd_val = kd_loss(model, theta_new, st.mu_local[i] - eta2 * h, x, direction)[0]
                k = psi_gradient(psi_i, kd_val)
                v = clip(np.append(h, k), dp.clip.c1)
                res.max_clipped_norm = max(res.max_clipped_norm, float(np.linalg.norm(v)))
                if dp.sigma_q1 > 0:
                    v = v + dp.sigma_q1 * rng.stream("dp-noise", i, t).standard_normal(D + 1)
                st.mu_local[i] = st.mu_local[i] - eta2 * v[:D]
                st.psi_local[i] = max(psi_i - eta3 * v[D], floor)
                continue
            if dp is not None:
                h = clip(h, dp.clip.c1)
                res.max_clipped_norm = max(res.max_clipped_norm, float(np.linalg.norm(h)))
                if dp.sigma_q1 > 0:
                    h = h + dp.sigma_q1 * rng.stream("dp-noise-mu", i, t).standard_normal(D)
            st.mu_local[i] = st.mu_local[i] - eta2 * h
            kd_val, _, _ = kd_loss(model, theta_new, st.mu_local[i], x, direction)
            k = psi_gradient(psi_i, kd_val)
            if dp is not None:
                k = float(clip(np.array([k]), dp.clip.c2)[0])
                if dp.sigma_q2 > 0:
                    k = k + dp.sigma_q2 * float(rng.stream("dp-noise-psi", i, t).standard_normal())
            st.psi_local[i] = max(psi_i - eta3 * k, floor)

        if (t + 1) % config.tau == 0:
            st.mu = st.mu_local[st.sampled].mean(axis=0)
            st.psi = max(float(st.psi_local[st.sampled].mean()), floor)
        eta1 *= config.decay
        eta2 *= config.decay
        eta3 *= config.decay
        st.t = t + 1
        if not (np.all(np.isfinite(st.theta)) and np.all(np.isfinite(st.mu))):
            raise DivergenceError(f"non-finite model at iteration {t}", iteration=t)
        if (t + 1) % config.record_every == 0 or t + 1 == config.T:
            res.history.append({"t": t + 1, "psi": st.psi,
                                "mean_psi_local": float(st.psi_local.mean())})
    res.accuracy = _eval(model, st.theta, test)
    return res


def adaped_run(train, config: AdaPedConfig, rng, model: Classifier, test=None) -> AdaPedResult:
    """Personalized training with an adaptive distillation weight.

    Every ``tau`` iterations the server samples K clients and sends them the
    global model and psi. Sampled clients step their personalized model,
    their copy of the global model and their psi; at the end of the window
    the server averages the copies of the sampled clients.
    """
    return _run(train, config, rng, model, test)


def adaped_finetune_run(train, config: AdaPedConfig, rng, model: Classifier, test=None) -> AdaPedResult:
    """As :func:`adaped_run`, but unsampled clients keep training their models.

    They use the global model and psi they last received, for at most
    ``config.finetune_cap`` successive iterations (unlimited if None).
    """
    return _run(train, config, rng, model, test, finetune=True)


def dp_adaped_run(train, config: AdaPedConfig, dp: DpAdaPedConfig, rng, model: Classifier,
                  test=None) -> AdaPedResult:
    """Adaptive distillation with clipped and noised global-model and psi updates.

    The returned result carries the RDP curve of the run.
    """
    m = len(train)
    K = m if config.K is None else config.K
    res = _run(train, config, rng, model, test, dp=dp)
    res.rdp = adaped_rdp_curve(K, m, config.T, config.tau, dp.clip, dp.sigma_q1, dp.sigma_q2)
    return res


def local_only_run(train, config: AdaPedConfig, rng, model: Classifier, test=None) -> AdaPedResult:
    """Each client trains alone with the same step size and iteration count."""
    cfg = replace(config, use_kd=False, K=None, tau=1)
    return _run(train, cfg, rng, model, test)


def fedavg_classifier(train, config: AdaPedConfig, rng, model: Classifier, test=None,
                      local_steps: Optional[int] = None):
    """FedAvg on the classifier: ``tau`` local steps from the global model, then averaging.

    Returns (global params, per-client test accuracy).
    """
    data = _pairs(train)
    m = len(data)
    K = m if config.K is None else config.K
    rng = _as_contract(rng)
    w = model.init_params(rng.stream("adaped-init"))
    steps = config.tau if local_steps is None else local_steps
    eta = config.eta1
    rounds = -(-config.T // steps)
    for r in range(rounds):
        sampled = np.sort(rng.stream("fedavg-sample", None, r).choice(m, size=K, replace=False))
        locals_ = []
        for i in sampled:
            th = w.copy()
            for s in range(steps):
                x, y = _batch(rng.stream("fedavg-batch", i, r * steps + s), *data[i], config.batch_size)
                _, g = cross_entropy(model, th, x, y)
                th = th - eta * (g + config.weight_decay * th)
            locals_.append(th)
        w = np.mean(locals_, axis=0)
        eta *= config.decay ** steps
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"FedAvg diverged at round {r}", iteration=r)
    acc = None if test is None else _eval(model, [w] * m, test)
    return w, acc


# ---------------------------------------------------------------------------
# Synthetic heterogeneous tasks


def synthetic_classification_tasks(m: int, n: int, d: int, rng, n_clusters: int = 3,
                                   n_test: int = 200, shared_scale: float = 2.0,
                                   cluster_scale: float = 2.0, homogeneous: bool = False):
    """Binary logistic tasks whose true weights are shared + cluster-specific.

    Client i in cluster c has labels y ~ Bern(sigmoid(x . (w0 + w_c))).
    With ``homogeneous`` every client uses the same weights.
    Returns (train, test, cluster labels).
    """
    rng = _as_contract(rng)
    g = rng.stream("tasks-global")
    w0 = shared_scale * g.standard_normal(d) / math.sqrt(d)
    wc = cluster_scale * g.standard_normal((n_clusters, d)) / math.sqrt(d)
    train, test, labels = [], [], []
    for i in range(m):
        gi = rng.stream("tasks-client", i)
        c = 0 if homogeneous else i % n_clusters
        w = w0 + (0.0 if homogeneous else wc[c])
        x = gi.standard_normal((n + n_test, d))
        y = (gi.random(n + n_test) < special.expit(x @ w)).astype(int)
        train.append(ClientDataset(i, x[:n], y[:n]))
        test.append(ClientDataset(i, x[n:], y[n:]))
        labels.append(c)
    return train, test, np.array(labels)


# ---------------------------------------------------------------------------
# Density of the KD-induced population prior (binary outputs)


@dataclass(frozen=True)
class KdPopulationDensity:
    """Density over q(x) = p_theta(y=1|x), x in a finite alphabet.

    Proportional to exp(-psi sum_x p(x) KL(p_mu(.|x) || q(.|x))), which
    factorizes into Beta(c a + 1, c (1 - a) + 1) densities with
    c = psi p(x) and a = p_mu(y=1|x).
    """

    p_mu: np.ndarray
    psi: float
    p_x: np.ndarray

    @property
    def beta_params(self):
        c = self.psi * self.p_x
        return c * self.p_mu + 1.0, c * (1.0 - self.p_mu) + 1.0

    def log_normalizer(self) -> float:
        """log c(psi): the constant multiplying exp(-psi * E_x KL)."""
        a, b = self.beta_params
        c = self.psi * self.p_x
        ent = -special.xlogy(self.p_mu, self.p_mu) - special.xlogy(1 - self.p_mu, 1 - self.p_mu)
        return float(np.sum(-special.betaln(a, b) - c * ent))

    def log_density(self, q) -> float:
        q = np.asarray(q, dtype=float)
        a, b = self.beta_params
        return float(np.sum(stats.beta.logpdf(q, a, b), axis=-1))

    def density(self, q) -> float:
        return math.exp(self.log_density(q))

    def unnormalized_log_density(self, q) -> float:
        q = np.asarray(q, dtype=float)
        pm = self.p_mu
        kl = special.xlogy(pm, pm) - special.xlogy(pm, q) + special.xlogy(1 - pm, 1 - pm) \
            - special.xlogy(1 - pm, 1 - q)
        return float(-self.psi * np.sum(self.p_x * kl))


def kd_population_density(p_mu, psi: float, p_x, n_classes: int = 2) -> KdPopulationDensity:
    """Prior over binary predictors induced by a KD regularizer of weight psi."""
    if n_classes != 2:
        raise ParameterError("the closed-form density is available for binary outputs only")
    p_mu = np.atleast_1d(np.asarray(p_mu, dtype=float))
    p_x = np.atleast_1d(np.asarray(p_x, dtype=float))
    if p_mu.shape != p_x.shape:
        raise ParameterError("p_mu and p_x must have one entry per input")
    if np.any((p_mu < 0) | (p_mu > 1)) or np.any(p_x < 0) or abs(p_x.sum() - 1) > 1e-9:
        raise ParameterError("invalid probability tables")
    if psi < 0:
        raise ParameterError("psi must be >= 0")
    return KdPopulationDensity(p_mu, float(psi), p_x)
