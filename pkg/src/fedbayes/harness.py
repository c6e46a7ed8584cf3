"""Experiment configuration, dispatch, aggregation over seeds and reporting."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import special

from . import adaped as ad
from . import bern_est, gauss_est, learn, mixture_est
from .core import (ClientDataset, DiscretePrior, GaussianPrior, ScalarPrior,
                   SyntheticDataset, _as_contract, paper_linreg_prior, sample_bernoulli_population,
                   sample_gaussian_population, sample_mixture_population,
                   sample_regression_population)
from .errors import ConfigError, FedBayesError, ParameterError
from .privacy import UNBOUNDED, ClipSpec, MechanismSpec, adaped_rdp_curve, rdp_to_dp

__all__ = [
    "KINDS",
    "PRESETS",
    "ExperimentConfig",
    "MetricRow",
    "ExperimentReport",
    "BinaryPanel",
    "PanelFold",
    "evaluate_mse",
    "load_binary_panel",
    "parse_binary_panel",
    "panel_cv",
    "run_experiment",
    "emit_report",
    "report_to_csv",
    "gain_pct",
]

KINDS = ("gauss", "bern", "mixture", "linreg", "logreg", "gmm-learn", "adaped", "dp-adaped",
         "accountant", "panel-cv")
FORMATS = ("json", "csv")


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ExperimentConfig:
    """One experiment. ``params`` holds the kind-specific hyperparameters."""

    kind: str
    prior: dict = field(default_factory=dict)
    m: Optional[int] = None
    n: Optional[int] = None
    d: Optional[int] = None
    mechanism: Optional[dict] = None
    params: dict = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0])
    out: Optional[str] = None
    format: str = "json"

    _REQUIRED = {
        "gauss": ("m", "n", "d"),
        "bern": ("m", "n"),
        "mixture": ("m", "n"),
        "linreg": ("m", "n", "d"),
        "logreg": ("m", "n", "d"),
        "gmm-learn": ("m", "n", "d"),
        "adaped": ("m", "n", "d"),
        "dp-adaped": ("m", "n", "d"),
        "accountant": (),
        "panel-cv": (),
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        for name in self._REQUIRED[self.kind]:
            val = getattr(self, name)
            if val is None:
                raise ConfigError(f"{self.kind} experiments need {name!r}")
            if not isinstance(val, int) or val < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if not isinstance(self.params, dict) or not isinstance(self.prior, dict):
            raise ConfigError("prior and params must be JSON objects")
        if self.kind == "panel-cv" and "path" not in self.params:
            raise ConfigError("panel-cv experiments need params.path")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {"kind", "prior", "m", "n", "d", "mechanism", "params", "seeds", "out", "format"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        if "kind" not in doc:
            raise ConfigError("config needs a 'kind'")
        doc = dict(doc)
        if "seeds" in doc:
            doc["seeds"] = list(doc["seeds"])
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def experiment_dict(self) -> dict:
        """The fields that define the experiment (output location excluded)."""
        doc = self.to_dict()
        doc.pop("out")
        doc.pop("format")
        return doc

    def config_hash(self) -> str:
        blob = json.dumps(self.experiment_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


PRESETS: Dict[str, dict] = {
    "paper-linreg": {
        "kind": "linreg",
        "prior": {"mu_sd": 0.1, "sigma_theta_sq": 0.01, "sigma_x_sq": 0.05},
        "m": 2000, "n": 10, "d": 50,
        "params": {"feature_sd": math.sqrt(0.05), "eta": 0.002, "T": 500, "decay": 0.99,
                   "tau": 1, "init": "ols"},
        "seeds": [0],
    },
    "paper-bern-3spike": {
        "kind": "bern",
        "prior": {"kind": "three_spike"},
        "m": 10000, "n": 14,
        "seeds": [0],
    },
    "paper-dp-gauss": {
        "kind": "gauss",
        "prior": {"sigma_theta_sq": 0.01, "sigma_x_sq": 0.25, "mu": 0.0},
        "m": 10000, "n": 15, "d": 1,
        "mechanism": {"kind": "gaussian_ldp", "epsilon0": 1.0, "delta": 1e-5, "a": "auto"},
        "seeds": [0],
    },
    "paper-fed": {
        "kind": "adaped",
        "m": 30, "n": 50, "d": 10,
        "params": {"eta1": 0.1, "eta2": 0.1, "eta3": 0.03, "psi0": 4.0, "psi_floor": 0.5,
                   "T": 300, "tau": 5, "n_clusters": 3},
        "seeds": [0, 1, 2, 3, 4],
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return ExperimentConfig.from_dict(json.loads(json.dumps(PRESETS[name])))


# ---------------------------------------------------------------------------
# Metrics


def evaluate_mse(estimates, truths):
    """Mean over clients of the squared L2 error, with its standard error."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape[0] != tru.shape[0]:
        raise ParameterError(f"length mismatch: {est.shape[0]} estimates vs {tru.shape[0]} truths")
    if est.shape != tru.shape:
        try:
            tru = tru.reshape(est.shape)
        except ValueError as exc:
            raise ParameterError("estimates and truths have incompatible shapes") from exc
    return gauss_est.mse_with_se(est, tru)


def gain_pct(mse: float, baseline: float) -> float:
    """100 (1 - mse / baseline)."""
    if baseline == 0:
        return math.nan
    return 100.0 * (1.0 - mse / baseline)


@dataclass
class MetricRow:
    metric: str
    estimator: str
    value: float
    stderr: Optional[float]


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    config_hash: str
    seeds: List[int]
    metrics: List[MetricRow]
    per_seed: List[dict]
    trajectories: dict = field(default_factory=dict)
    privacy: Optional[dict] = None
    notes: List[str] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def value(self, metric: str, estimator: str) -> float:
        for row in self.metrics:
            if row.metric == metric and row.estimator == estimator:
                return row.value
        raise KeyError((metric, estimator))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "metrics": [asdict(r) for r in self.metrics],
            "per_seed": self.per_seed,
            "trajectories": self.trajectories,
            "privacy": self.privacy,
            "notes": self.notes,
            "wall_clock_s": self.wall_clock_s,
        }


# ---------------------------------------------------------------------------
# Per-kind single-seed runners. Each returns
# {"values": {metric: {estimator: value}}, "stderr": {...}, "traj": ..., "privacy": ..., "notes": [...]}


def _outcome(values, stderr=None, traj=None, privacy=None, notes=None):
    return {"values": values, "stderr": stderr or {}, "traj": traj, "privacy": privacy,
            "notes": notes or []}


def _mse_block(pairs: Dict[str, tuple]):
    vals = {k: v[0] for k, v in pairs.items()}
    ses = {k: v[1] for k, v in pairs.items()}
    return {"mse": vals}, {"mse": ses}


def _gaussian_prior(cfg: ExperimentConfig) -> GaussianPrior:
    p = cfg.prior
    try:
        mu = p.get("mu", 0.0)
        mu = np.full(cfg.d, float(mu)) if np.isscalar(mu) else np.asarray(mu, dtype=float)
        return GaussianPrior(mu, float(p["sigma_theta_sq"]), float(p["sigma_x_sq"]))
    except KeyError as exc:
        raise ConfigError(f"prior needs {exc.args[0]!r}") from exc


def _mechanism(spec, default_a=None) -> Optional[MechanismSpec]:
    if spec is None:
        return None
    kind = spec.get("kind", "identity")
    a = spec.get("a", default_a)
    if a == "auto":
        a = default_a
    try:
        if kind == "identity":
            return MechanismSpec.identity()
        if kind == "quantizer":
            return MechanismSpec.quantizer(int(spec["bits"]), float(a))
        if kind == "gaussian_ldp":
            return MechanismSpec.gaussian_ldp(float(spec["epsilon0"]), float(spec["delta"]), float(a))
        if kind == "binary_response":
            return MechanismSpec.binary_response(float(spec["epsilon0"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"mechanism {kind!r} is missing a field: {exc}") from exc
    raise ConfigError(f"unknown mechanism kind {kind!r}")


def _run_gauss(cfg: ExperimentConfig, seed: int):
    prior = _gaussian_prior(cfg)
    if prior.d != cfg.d:
        raise ConfigError("prior mean length must equal d")
    data = sample_gaussian_population(prior, cfg.m, cfg.n, seed)
    truth = data.true_params
    xbar = data.means()
    b = gauss_est.clip_radius_b(float(np.max(np.abs(prior.mu))), math.sqrt(prior.sigma_theta_sq),
                                math.sqrt(prior.sigma_x_sq), cfg.n, cfg.m)
    mech = _mechanism(cfg.mechanism, default_a=b)
    notes = []
    if mech is None or mech.kind == "identity":
        a = cfg.params.get("a")
        if a is None:
            a = gauss_est.shrinkage_weight(prior.sigma_theta_sq, prior.sigma_x_sq, cfg.n)
        rep = gauss_est.personalized_gaussian(data, float(a))
    else:
        rep = gauss_est.constrained_personalized_gaussian(data, mech, seed)
        if rep.projected_fraction > 0:
            notes.append(f"projected_fraction={rep.projected_fraction:.6g}")
        if mech.kind == "gaussian_ldp" and mech.epsilon0 >= 1:
            notes.append("epsilon0 >= 1 is outside the range covered by the LDP guarantee")
    glob = np.broadcast_to(rep.global_estimate, truth.shape)
    values, ses = _mse_block({
        "local": evaluate_mse(xbar, truth),
        "global": evaluate_mse(glob, truth),
        "personalized": (rep.mse, rep.mse_se),
    })
    values["theoretical_mse"] = {"personalized": rep.theoretical_mse}
    values["a"] = {"personalized": rep.a}
    return _outcome(values, ses, notes=notes)


def _scalar_prior(p: dict) -> ScalarPrior:
    kind = p.get("kind", "beta")
    if kind == "beta":
        return ScalarPrior.beta(float(p.get("alpha", 2.0)), float(p.get("beta", 2.0)))
    if kind == "three_spike":
        return ScalarPrior.three_spike()
    if kind == "uniform":
        return ScalarPrior.uniform()
    if kind == "clipped_normal":
        return ScalarPrior.clipped_normal(float(p.get("mean", 0.5)), float(p.get("sd", 0.15)))
    raise ConfigError(f"unknown Bernoulli prior kind {kind!r}")


def _run_bern(cfg: ExperimentConfig, seed: int):
    prior = _scalar_prior(cfg.prior)
    data = sample_bernoulli_population(prior, cfg.m, cfg.n, seed)
    truth = data.true_params
    xbar = data.sums() / cfg.n
    mech = _mechanism(cfg.mechanism)
    if mech is not None and mech.kind == "binary_response":
        rep = bern_est.private_personalized_bernoulli(data, mech.epsilon0, seed)
    elif mech is None or mech.kind == "identity":
        rep = bern_est.personalized_bernoulli(data)
    else:
        raise ConfigError("Bernoulli experiments accept only the binary_response mechanism")
    pairs = {
        "local": evaluate_mse(xbar, truth),
        "global": evaluate_mse(np.full_like(xbar, xbar.mean()), truth),
        "personalized": (rep.mse, rep.mse_se),
    }
    if prior.kind == "beta":
        al, be = prior.params
        pairs["posterior_known"] = evaluate_mse(
            bern_est.posterior_mean_known(al, be, cfg.n, data.sums()), truth)
    values, ses = _mse_block(pairs)
    return _outcome(values, ses)


def _discrete_prior(cfg: ExperimentConfig) -> DiscretePrior:
    p = cfg.prior
    try:
        centers = np.asarray(p["centers"], dtype=float)
    except KeyError as exc:
        raise ConfigError("mixture prior needs 'centers'") from exc
    if centers.ndim == 1:
        centers = centers[:, None]
    probs = np.asarray(p.get("probs", np.full(centers.shape[0], 1.0 / centers.shape[0])))
    return DiscretePrior(probs, centers, float(p.get("radius_r", np.max(np.abs(centers)))))


def _run_mixture(cfg: ExperimentConfig, seed: int):
    prior = _discrete_prior(cfg)
    sx = float(cfg.prior.get("sigma_x_sq", 1.0))
    data = sample_mixture_population(prior, cfg.m, cfg.n, sx, seed)
    truth = data.true_params
    xbar = data.means()
    mech = _mechanism(cfg.mechanism)
    T = int(cfg.params.get("T", 10))
    res = mixture_est.alt_min_estimation(data, prior.k, T, sx, seed, channel=mech,
                                         r=prior.radius_r, n_init=int(cfg.params.get("n_init", 5)))
    values, ses = _mse_block({
        "local": evaluate_mse(xbar, truth),
        "global": evaluate_mse(np.broadcast_to(xbar.mean(axis=0), xbar.shape), truth),
        "personalized": evaluate_mse(res.estimates, truth),
    })
    _, err = mixture_est.match_centers(res.trajectory[-1].centers, prior.centers)
    values["center_error"] = {"personalized": err}
    traj = [{"round": t, "center": l, "coords": c, "prob": p}
            for t, l, c, p in mixture_est.trajectory_rows(res.trajectory)]
    return _outcome(values, ses, traj=traj)


def _gd_config(params: dict, **defaults) -> learn.GDConfig:
    keys = ("eta", "T", "tau", "decay", "weight_decay", "init", "record_every")
    kw = {**defaults, **{k: params[k] for k in keys if k in params}}
    if "frozen" in params:
        kw["frozen"] = tuple(params["frozen"])
    return learn.GDConfig(**kw)


def _regression_prior(cfg: ExperimentConfig, seed: int) -> GaussianPrior:
    p = cfg.prior
    if "mu" in p:
        return _gaussian_prior(cfg)
    return paper_linreg_prior(cfg.d, seed, float(p.get("mu_sd", 0.1)),
                              float(p.get("sigma_theta_sq", 0.01)), float(p.get("sigma_x_sq", 0.05)))


def _run_linreg(cfg: ExperimentConfig, seed: int):
    prior = _regression_prior(cfg, seed)
    fsd = float(cfg.params.get("feature_sd", math.sqrt(0.05)))
    data = sample_regression_population(prior, cfg.m, cfg.n, fsd, seed)
    truth = data.true_params
    X = np.stack([c.x for c in data.clients])
    Y = np.stack([c.y for c in data.clients])
    ols = np.stack([learn.ols_local(x, y) for x, y in zip(X, Y)])
    pooled = learn.ols_local(X.reshape(-1, cfg.d), Y.ravel())
    oracle = np.stack([learn.linreg_closed_form(x, y, prior.mu, prior.sigma_theta_sq,
                                                prior.sigma_x_sq) for x, y in zip(X, Y)])
    config = _gd_config(cfg.params, eta=0.002, T=500, decay=0.99, record_every=10)
    res = learn.linreg_gd_run(data, config)
    values, ses = _mse_block({
        "local": evaluate_mse(ols, truth),
        "global": evaluate_mse(np.broadcast_to(pooled, truth.shape), truth),
        "personalized": evaluate_mse(res.state.theta, truth),
        "oracle": evaluate_mse(oracle, truth),
    })
    return _outcome(values, ses, traj=res.history)


def _logistic_population(prior: GaussianPrior, m: int, n: int, fsd: float, seed: int):
    rng = _as_contract(seed)
    thetas, clients = [], []
    for i in range(m):
        g = rng.stream("logistic-population", i)
        theta = prior.mu + math.sqrt(prior.sigma_theta_sq) * g.standard_normal(prior.d)
        x = fsd * g.standard_normal((n, prior.d))
        y = (g.random(n) < special.expit(x @ theta)).astype(float)
        thetas.append(theta)
        clients.append(ClientDataset(i, x, y))
    return SyntheticDataset(prior, np.array(thetas), tuple(clients))


def _run_logreg(cfg: ExperimentConfig, seed: int):
    p = cfg.prior
    prior = _gaussian_prior(cfg) if "mu" in p else paper_linreg_prior(
        cfg.d, seed, float(p.get("mu_sd", 1.0)), float(p.get("sigma_theta_sq", 1.0)), 1.0)
    fsd = float(cfg.params.get("feature_sd", 1.0))
    data = _logistic_population(prior, cfg.m, cfg.n, fsd, seed)
    truth = data.true_params
    config = _gd_config(cfg.params, eta=0.05, T=300, init="zeros", record_every=10)
    res = learn.logreg_gd_run(data, config)
    local = learn.logreg_gd_run(data, _gd_config({**cfg.params, "frozen": ["mu", "sigma_theta_sq"]},
                                                 eta=0.05, T=300, init="zeros", record_every=10),
                                init={"mode": "zeros", "sigma_theta_sq": 1e8})
    glob = learn.fedavg_baseline(data, _gd_config(cfg.params, eta=0.05, T=300, init="zeros"),
                                 kind="logreg")
    values, ses = _mse_block({
        "local": evaluate_mse(local.state.theta, truth),
        "global": evaluate_mse(np.broadcast_to(glob.model, truth.shape), truth),
        "personalized": evaluate_mse(res.state.theta, truth),
    })
    return _outcome(values, ses, traj=res.history)


def _run_gmm(cfg: ExperimentConfig, seed: int):
    p = cfg.prior
    try:
        centers = np.asarray(p["centers"], dtype=float).reshape(-1, cfg.d)
    except KeyError as exc:
        raise ConfigError("gmm-learn prior needs 'centers'") from exc
    k = centers.shape[0]
    probs = np.asarray(p.get("probs", np.full(k, 1.0 / k)), dtype=float)
    sd = float(p.get("component_sd", 0.1))
    sx = float(p.get("sigma_x_sq", 0.05))
    fsd = float(cfg.params.get("feature_sd", 1.0))
    rng = _as_contract(seed)
    cdf = np.cumsum(probs)
    thetas, clients = [], []
    for i in range(cfg.m):
        g = rng.stream("gmm-population", i)
        l = min(int(np.searchsorted(cdf, g.random(), side="right")), k - 1)
        theta = centers[l] + sd * g.standard_normal(cfg.d)
        x = fsd * g.standard_normal((cfg.n, cfg.d))
        y = x @ theta + math.sqrt(sx) * g.standard_normal(cfg.n)
        thetas.append(theta)
        clients.append(ClientDataset(i, x, y))
    truth = np.array(thetas)
    ols = np.stack([learn.ols_local(c.x, c.y) for c in clients])
    # default step: half the inverse curvature of data term plus component prior
    curvature = cfg.n * fsd * fsd / sx + 1.0 / max(sd, 1e-3) ** 2
    config = _gd_config(cfg.params, eta=min(0.01, 0.5 / curvature), T=200)
    theta, priors = learn.gmm_prior_learning(clients, k, config, seed, "linreg", sigma_x_sq=sx)
    disc = learn.discrete_prior_regression(clients, k, int(cfg.params.get("T_discrete", 10)), sx, seed)
    values, ses = _mse_block({
        "local": evaluate_mse(ols, truth),
        "global": evaluate_mse(np.broadcast_to(ols.mean(axis=0), truth.shape), truth),
        "personalized": evaluate_mse(theta, truth),
        "discrete": evaluate_mse(disc.estimates, truth),
    })
    traj = [{"round": t, "center": l, "coords": c.tolist(), "prob": float(pr), "sd": float(s)}
            for t, pri in enumerate(priors)
            for l, (c, pr, s) in enumerate(zip(pri.centers, pri.probs, pri.component_sds))]
    return _outcome(values, ses, traj=traj)


_ADAPED_KEYS = ("T", "tau", "eta1", "eta2", "eta3", "K", "psi0", "psi_floor", "batch_size",
                "kd_direction", "use_kd", "decay", "weight_decay", "finetune_cap")


def _adaped_setup(cfg: ExperimentConfig, seed: int):
    p = cfg.params
    acfg = ad.AdaPedConfig(**{k: p[k] for k in _ADAPED_KEYS if k in p})
    model = ad.Classifier(cfg.d, 2, p.get("hidden"))
    train, test, _ = ad.synthetic_classification_tasks(
        cfg.m, cfg.n, cfg.d, seed, n_clusters=int(p.get("n_clusters", 3)),
        n_test=int(p.get("n_test", 200)), homogeneous=bool(p.get("homogeneous", False)))
    return acfg, model, train, test


def _acc_block(results: Dict[str, np.ndarray]):
    vals, ses = {}, {}
    for name, acc in results.items():
        vals[name] = float(np.mean(acc))
        ses[name] = float(np.std(acc, ddof=1) / math.sqrt(acc.size)) if acc.size > 1 else None
    return {"accuracy": vals}, {"accuracy": ses}


def _run_adaped(cfg: ExperimentConfig, seed: int):
    acfg, model, train, test = _adaped_setup(cfg, seed)
    res = ad.adaped_run(train, acfg, seed, model, test)
    accs = {"adaped": res.accuracy,
            "local": ad.local_only_run(train, acfg, seed, model, test).accuracy,
            "fedavg": ad.fedavg_classifier(train, acfg, seed, model, test)[1]}
    if cfg.params.get("finetune"):
        accs["adaped-finetune"] = ad.adaped_finetune_run(train, acfg, seed, model, test).accuracy
    values, ses = _acc_block(accs)
    values["final_psi"] = {"adaped": res.state.psi}
    traj = [{"round": t, "who": who, "quantity": q, "value": v} for t, who, q, v in res.psi_rows()]
    return _outcome(values, ses, traj=traj)


def _clip_spec(p: dict) -> ClipSpec:
    return ClipSpec(float(p.get("c1", 1.0)), float(p.get("c2", 1.0)), p.get("mode", "separate"))


def _budget(curve, p: dict) -> dict:
    out = {"rdp": curve.to_dict()}
    if curve.is_unbounded:
        out.update({"epsilon": UNBOUNDED, "delta": p.get("delta"), "alpha_star": None})
        return out
    if p.get("epsilon") is not None:
        out.update(rdp_to_dp(curve, epsilon=float(p["epsilon"])).to_dict())
    else:
        out.update(rdp_to_dp(curve, delta=float(p.get("delta", 1e-5))).to_dict())
    return out


def _run_dp_adaped(cfg: ExperimentConfig, seed: int):
    acfg, model, train, test = _adaped_setup(cfg, seed)
    p = cfg.params
    dp = ad.DpAdaPedConfig(_clip_spec(p), float(p.get("sigma_q1", 1.0)), float(p.get("sigma_q2", 1.0)))
    res = ad.dp_adaped_run(train, acfg, dp, seed, model, test)
    plain = ad.adaped_run(train, acfg, seed, model, test)
    values, ses = _acc_block({"dp-adaped": res.accuracy, "adaped": plain.accuracy})
    values["final_psi"] = {"dp-adaped": res.state.psi, "adaped": plain.state.psi}
    traj = [{"round": t, "who": who, "quantity": q, "value": v} for t, who, q, v in res.psi_rows()]
    return _outcome(values, ses, traj=traj, privacy=_budget(res.rdp, p))


def _run_accountant(cfg: ExperimentConfig, seed: int):
    p = cfg.params
    try:
        K, m, T, tau = int(p["K"]), int(p["m"]), int(p["T"]), int(p.get("tau", 1))
    except KeyError as exc:
        raise ConfigError(f"accountant needs params.{exc.args[0]}") from exc
    curve = adaped_rdp_curve(K, m, T, tau, _clip_spec(p), float(p.get("sigma_q1", 1.0)),
                             float(p.get("sigma_q2", 1.0)))
    budget = _budget(curve, p)
    eps = budget["epsilon"]
    values = {"epsilon": {"accountant": math.inf if eps == UNBOUNDED else eps},
              "delta": {"accountant": budget["delta"]}}
    return _outcome(values, privacy=budget)


def _run_panel(cfg: ExperimentConfig, seed: int):
    panel = load_binary_panel(cfg.params["path"])
    res = panel_cv(panel)
    values = {"mse": {"local": res["local"], "personalized": res["personalized"]}}
    return _outcome(values, {"mse": {"local": res["local_se"], "personalized": res["personalized_se"]}},
                    notes=[f"units={panel.units}", f"rounds={panel.rounds}"])


_RUNNERS = {
    "gauss": _run_gauss,
    "bern": _run_bern,
    "mixture": _run_mixture,
    "linreg": _run_linreg,
    "logreg": _run_logreg,
    "gmm-learn": _run_gmm,
    "adaped": _run_adaped,
    "dp-adaped": _run_dp_adaped,
    "accountant": _run_accountant,
    "panel-cv": _run_panel,
}


# ---------------------------------------------------------------------------
# Binary panels


@dataclass(frozen=True)
class BinaryPanel:
    ids: tuple
    cells: np.ndarray  # (units, rounds), int8
    round_names: tuple = ()

    @property
    def units(self) -> int:
        return self.cells.shape[0]

    @property
    def rounds(self) -> int:
        return self.cells.shape[1]


@dataclass(frozen=True)
class PanelFold:
    held_out: int
    train_means: np.ndarray
    held_out_bits: np.ndarray


def parse_binary_panel(text: str) -> BinaryPanel:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration as exc:
        raise ConfigError("empty panel file") from exc
    header = [h.strip() for h in header]
    if len(header) < 2 or header[0] != "id":
        raise ConfigError("panel header must be 'id,r1,...,rk'")
    k = len(header) - 1
    ids, rows = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != k + 1:
            raise ConfigError(f"row {lineno}: expected {k + 1} fields, found {len(row)}")
        bits = []
        for col, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ConfigError(f"row {lineno}, column {col}: non-binary cell {cell!r}")
            bits.append(int(cell))
        ids.append(row[0].strip())
        rows.append(bits)
    if not rows:
        raise ConfigError("panel has no data rows")
    return BinaryPanel(tuple(ids), np.array(rows, dtype=np.int8), tuple(header[1:]))


def load_binary_panel(path: str) -> BinaryPanel:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return parse_binary_panel(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read panel {path}: {exc}") from exc


def panel_folds(panel: BinaryPanel):
    """Leave-one-round-out folds: train means from the other rounds."""
    if panel.rounds < 2:
        raise ConfigError("cross validation needs at least two rounds")
    for r in range(panel.rounds):
        keep = np.delete(panel.cells, r, axis=1).astype(float)
        yield PanelFold(r, keep.mean(axis=1), panel.cells[:, r].astype(float))


def panel_cv(panel: BinaryPanel) -> dict:
    """Squared error (p_hat - held-out bit)^2 of local and personalized estimates.

    Averaged over units and folds; standard errors over the fold-level means.
    """
    n_train = panel.rounds - 1
    loc, per = [], []
    for fold in panel_folds(panel):
        xbar = fold.train_means
        if panel.units >= 3:
            p_hat = bern_est.personalized_bernoulli(xbar, n=n_train).estimates
        else:
            p_hat = xbar
        loc.append(np.mean((xbar - fold.held_out_bits) ** 2))
        per.append(np.mean((p_hat - fold.held_out_bits) ** 2))
    loc, per = np.array(loc), np.array(per)

    def se(v):
        return float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else None

    return {"local": float(loc.mean()), "personalized": float(per.mean()),
            "local_se": se(loc), "personalized_se": se(per),
            "fold_local": loc.tolist(), "fold_personalized": per.tolist()}


# ---------------------------------------------------------------------------
# Orchestration


def _threads() -> int:
    raw = os.environ.get("FEDBAYES_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"FEDBAYES_THREADS must be an integer, got {raw!r}") from exc


def _run_one(args):
    cfg_dict, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return _RUNNERS[cfg.kind](cfg, seed)


_MSE_KINDS = ("gauss", "bern", "mixture", "linreg", "logreg", "gmm-learn", "panel-cv")


def _aggregate(cfg: ExperimentConfig, outcomes: List[dict]) -> List[MetricRow]:
    S = len(outcomes)
    rows = []
    first = outcomes[0]["values"]
    for metric, by_est in first.items():
        for est in by_est:
            vals = np.array([o["values"][metric][est] for o in outcomes], dtype=float)
            mean = float(vals.mean())
            if S > 1:
                sd = float(vals.std(ddof=1))
            else:
                sd = outcomes[0]["stderr"].get(metric, {}).get(est)
            rows.append(MetricRow(metric, est, mean, sd))
    if cfg.kind in _MSE_KINDS:
        mse = {r.estimator: r.value for r in rows if r.metric == "mse"}
        for base in ("local", "global"):
            if base not in mse:
                continue
            for est, val in mse.items():
                per = [gain_pct(o["values"]["mse"][est], o["values"]["mse"][base]) for o in outcomes]
                sd = float(np.std(per, ddof=1)) if S > 1 else None
                rows.append(MetricRow(f"gain_pct_vs_{base}", est, gain_pct(val, mse[base]), sd))
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if math.isinf(f):
            return UNBOUNDED
        return None if math.isnan(f) else f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run every seed of ``config`` and aggregate.

    Seeds run in parallel when FEDBAYES_THREADS > 1; results are reduced in
    seed order so the report does not depend on scheduling.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    config.validate()
    t0 = time.perf_counter()
    jobs = [(config.to_dict(), s) for s in config.seeds]
    workers = min(_threads(), len(jobs))
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_run_one, jobs))
        else:
            outcomes = [_run_one(j) for j in jobs]
    except FedBayesError as exc:
        exc.args = (f"{config.kind} experiment failed: {exc}",) + exc.args[1:]
        raise
    rows = _aggregate(config, outcomes)
    notes = sorted({n for o in outcomes for n in o["notes"]})
    per_seed = [{"seed": s, "values": o["values"]} for s, o in zip(config.seeds, outcomes)]
    traj = {str(s): o["traj"] for s, o in zip(config.seeds, outcomes) if o["traj"] is not None}
    privacy = outcomes[0]["privacy"]
    report = ExperimentReport(config.kind, config.experiment_dict(), config.config_hash(),
                              list(config.seeds), rows, per_seed, traj, privacy, notes)
    report.per_seed = _jsonable(report.per_seed)
    report.trajectories = _jsonable(report.trajectories)
    report.privacy = _jsonable(report.privacy)
    report.wall_clock_s = time.perf_counter() - t0
    return report


def report_to_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={report.config_hash}\n")
    buf.write(f"# seeds={' '.join(str(s) for s in report.seeds)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "estimator", "value", "stderr"])
    for r in report.metrics:
        val = UNBOUNDED if isinstance(r.value, float) and math.isinf(r.value) else repr(r.value)
        w.writerow([r.metric, r.estimator, val, "" if r.stderr is None else repr(r.stderr)])
    return buf.getvalue()


def report_to_json(report: ExperimentReport) -> str:
    return json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True) + "\n"


def emit_report(report: ExperimentReport, fmt: str = "json", path: Optional[str] = None) -> str:
    """Serialize the report; write it to ``path`` when given. Returns the text."""
    if fmt not in FORMATS:
        raise ConfigError(f"format must be one of {FORMATS}")
    text = report_to_json(report) if fmt == "json" else report_to_csv(report)
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise ConfigError(f"cannot write report to {path}: {exc}") from exc
    return text
