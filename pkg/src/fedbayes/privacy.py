"""Privatizing channels, clipping and Renyi-DP accounting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NoBudgetError, OrderError, ParameterError, RangeError

__all__ = [
    "PrivacyRegimeWarning",
    "RoundingWarning",
    "MechanismSpec",
    "ClipSpec",
    "RdpCurve",
    "DpBudget",
    "UNBOUNDED",
    "clip",
    "stochastic_quantizer",
    "gaussian_mechanism",
    "binary_response",
    "binary_response_probs",
    "apply_mechanism",
    "gaussian_ldp_sigma",
    "adaped_rdp",
    "adaped_rdp_curve",
    "rdp_compose",
    "rdp_to_dp",
    "default_orders",
]


class PrivacyRegimeWarning(UserWarning):
    """Parameters outside the regime where a privacy guarantee was derived."""


class RoundingWarning(UserWarning):
    """A round count had to be rounded up."""


UNBOUNDED = "unbounded"


# ---------------------------------------------------------------------------
# Mechanism and clipping specs


@dataclass(frozen=True)
class MechanismSpec:
    """A one-shot channel applied to a client statistic.

    kind is one of ``identity``, ``quantizer``, ``gaussian_ldp`` and
    ``binary_response``. ``a`` is the range half-width for the first two
    non-trivial kinds.
    """

    kind: str = "identity"
    bits: Optional[int] = None
    a: Optional[float] = None
    epsilon0: Optional[float] = None
    delta: Optional[float] = None

    def __post_init__(self):
        if self.kind == "identity":
            return
        if self.kind == "quantizer":
            if self.bits is None or self.bits < 1 or not (self.a is not None and self.a > 0):
                raise ParameterError("quantizer needs bits >= 1 and a > 0")
        elif self.kind == "gaussian_ldp":
            if not (self.epsilon0 is not None and self.epsilon0 > 0):
                raise ParameterError("gaussian_ldp needs epsilon0 > 0")
            if not (self.delta is not None and 0 < self.delta < 1):
                raise ParameterError("gaussian_ldp needs delta in (0, 1)")
            if not (self.a is not None and self.a > 0):
                raise ParameterError("gaussian_ldp needs a > 0")
        elif self.kind == "binary_response":
            if not (self.epsilon0 is not None and self.epsilon0 > 0):
                raise ParameterError("binary_response needs epsilon0 > 0")
        else:
            raise ParameterError(f"unknown mechanism kind {self.kind!r}")

    @classmethod
    def identity(cls) -> "MechanismSpec":
        return cls("identity")

    @classmethod
    def quantizer(cls, bits: int, a: float) -> "MechanismSpec":
        return cls("quantizer", bits=int(bits), a=float(a))

    @classmethod
    def gaussian_ldp(cls, epsilon0: float, delta: float, a: float) -> "MechanismSpec":
        return cls("gaussian_ldp", a=float(a), epsilon0=float(epsilon0), delta=float(delta))

    @classmethod
    def binary_response(cls, epsilon0: float) -> "MechanismSpec":
        return cls("binary_response", epsilon0=float(epsilon0))

    @property
    def sigma_q(self) -> float:
        """Per-coordinate noise scale of the channel.

        For binary_response this is the largest output standard deviation
        over inputs in [0, 1].
        """
        if self.kind == "identity":
            return 0.0
        if self.kind == "quantizer":
            return self.a / (2 ** self.bits - 1)
        if self.kind == "gaussian_ldp":
            return self.a * math.sqrt(8.0 * math.log(2.0 / self.delta)) / self.epsilon0
        e = math.exp(self.epsilon0)
        return (e + 1.0) / (2.0 * (e - 1.0))

    @property
    def range_half_width(self) -> Optional[float]:
        return self.a

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for key in ("bits", "a", "epsilon0", "delta"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


@dataclass(frozen=True)
class ClipSpec:
    c1: float = 1.0
    c2: float = 1.0
    mode: str = "separate"

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ParameterError("clip thresholds must be positive")
        if self.mode not in ("separate", "joint"):
            raise ParameterError("clip mode must be 'separate' or 'joint'")


def clip(v, c: float) -> np.ndarray:
    """Scale ``v`` down to norm at most ``c``: v / max(||v|| / c, 1)."""
    if not c > 0:
        raise ParameterError("clip threshold must be positive")
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    return v / max(norm / c, 1.0)


# ---------------------------------------------------------------------------
# Channels


def stochastic_quantizer(x, k: int, a: float, rng: np.random.Generator):
    """Unbiased k-bit stochastic rounding of values in [-a, a].

    Each value is rounded to one of the two neighbouring points of the grid
    ``-a + 2a j / (2^k - 1)`` with probabilities that keep the mean exact.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    if not a > 0:
        raise ParameterError("a must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > a) or not np.all(np.isfinite(x)):
        raise RangeError("quantizer input outside [-a, a]; project first")
    levels = 2 ** k - 1
    scaled = (x + a) * levels / (2.0 * a)
    low = np.floor(scaled)
    up = rng.random(x.shape) < (scaled - low)
    j = np.minimum(low + up, levels)
    out = 2.0 * a * j / levels - a
    return out if out.ndim else float(out)


def gaussian_mechanism(x, sigma_q: float, rng: np.random.Generator):
    """x + N(0, sigma_q^2 I)."""
    if sigma_q < 0:
        raise ParameterError("sigma_q must be >= 0")
    x = np.asarray(x, dtype=float)
    if sigma_q == 0:
        return x.copy() if x.ndim else float(x)
    out = x + sigma_q * rng.standard_normal(x.shape)
    return out if out.ndim else float(out)


def binary_response_probs(x, epsilon0: float):
    """Probabilities of the low and the high output of the binary response channel."""
    e = math.exp(epsilon0)
    x = np.asarray(x, dtype=float)
    p_high = 1.0 / (e + 1.0) + x * (e - 1.0) / (e + 1.0)
    p_low = e / (e + 1.0) - x * (e - 1.0) / (e + 1.0)
    return p_low, p_high


def binary_response(x, epsilon0: float, rng: np.random.Generator):
    """Unbiased eps0-LDP randomizer for values in [0, 1].

    Outputs -1/(e^eps0 - 1) or e^eps0/(e^eps0 - 1).
    """
    if not epsilon0 > 0:
        raise ParameterError("epsilon0 must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise RangeError("binary_response input outside [0, 1]")
    em1 = math.expm1(epsilon0)
    low, high = -1.0 / em1, math.exp(epsilon0) / em1
    _, p_high = binary_response_probs(x, epsilon0)
    out = np.where(rng.random(x.shape) < p_high, high, low)
    return out if out.ndim else float(out)


def apply_mechanism(mech: MechanismSpec, x, rng: np.random.Generator):
    if mech.kind == "identity":
        x = np.asarray(x, dtype=float)
        return x.copy() if x.ndim else float(x)
    if mech.kind == "quantizer":
        return stochastic_quantizer(x, mech.bits, mech.a, rng)
    if mech.kind == "gaussian_ldp":
        return gaussian_mechanism(x, mech.sigma_q, rng)
    return binary_response(x, mech.epsilon0, rng)


def gaussian_ldp_sigma(epsilon0: float, delta: float, b: float) -> float:
    """Noise scale (b / eps0) sqrt(8 log(2 / delta)) for the Gaussian LDP channel.

    The guarantee is derived for eps0 < 1. Larger values are accepted and
    raise a PrivacyRegimeWarning.
    """
    if not (epsilon0 > 0 and b > 0):
        raise ParameterError("epsilon0 and b must be positive")
    if not 0 < delta < 1:
        raise ParameterError("delta must lie in (0, 1)")
    if epsilon0 >= 1:
        warnings.warn("epsilon0 >= 1 is outside the derived regime", PrivacyRegimeWarning, stacklevel=2)
    return b / epsilon0 * math.sqrt(8.0 * math.log(2.0 / delta))


# ---------------------------------------------------------------------------
# RDP curves


@dataclass(frozen=True)
class DpBudget:
    epsilon: float
    delta: float
    alpha_star: Optional[float] = None

    def to_dict(self) -> dict:
        return {"alpha_star": self.alpha_star, "epsilon": self.epsilon, "delta": self.delta}


@dataclass(frozen=True)
class RdpCurve:
    """Renyi-DP loss as a function of the order.

    Either linear, eps(alpha) = coef * alpha, or tabulated on a fixed grid of
    orders. ``coef = inf`` represents an unbounded loss.
    """

    coef: Optional[float] = None
    orders: Optional[tuple] = None
    values: Optional[tuple] = None

    def __post_init__(self):
        if self.coef is not None:
            if self.orders is not None or self.values is not None:
                raise ParameterError("a curve is either linear or tabulated")
            if not self.coef >= 0:
                raise ParameterError("RDP coefficient must be >= 0")
            return
        if self.orders is None or self.values is None or len(self.orders) != len(self.values):
            raise ParameterError("tabulated curves need orders and values of equal length")
        orders = np.asarray(self.orders, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if np.any(orders <= 1) or np.any(np.diff(orders) <= 0):
            raise ParameterError("orders must be increasing and > 1")
        if np.any(values < 0) or np.any(np.diff(values) < 0):
            raise ParameterError("tabulated values must be nonnegative and nondecreasing")
        object.__setattr__(self, "orders", tuple(orders.tolist()))
        object.__setattr__(self, "values", tuple(values.tolist()))

    @classmethod
    def linear(cls, coef: float) -> "RdpCurve":
        return cls(coef=float(coef))

    @classmethod
    def zero(cls) -> "RdpCurve":
        return cls(coef=0.0)

    @classmethod
    def unbounded(cls) -> "RdpCurve":
        return cls(coef=math.inf)

    @classmethod
    def tabulated(cls, orders: Sequence[float], values: Sequence[float]) -> "RdpCurve":
        return cls(orders=tuple(orders), values=tuple(values))

    @property
    def is_linear(self) -> bool:
        return self.coef is not None

    @property
    def is_unbounded(self) -> bool:
        if self.is_linear:
            return math.isinf(self.coef)
        return all(math.isinf(v) for v in self.values)

    def __call__(self, alpha):
        alpha_arr = np.asarray(alpha, dtype=float)
        if np.any(alpha_arr <= 1):
            raise OrderError("Renyi order must exceed 1")
        if self.is_linear:
            out = self.coef * alpha_arr
        else:
            orders = np.asarray(self.orders)
            idx = np.searchsorted(orders, alpha_arr)
            hit = (idx < orders.size) & np.isclose(orders[np.minimum(idx, orders.size - 1)], alpha_arr,
                                                  rtol=1e-12, atol=0)
            if not np.all(hit):
                raise OrderError("tabulated curve evaluated off its grid")
            out = np.asarray(self.values)[idx]
        return out if out.ndim else float(out)

    def to_dict(self) -> dict:
        if self.is_linear:
            return {"form": "linear", "coef": UNBOUNDED if math.isinf(self.coef) else self.coef}
        vals = [UNBOUNDED if math.isinf(v) else v for v in self.values]
        return {"form": "tabulated", "orders": list(self.orders), "values": vals}


def _rounds(T: int, tau: int) -> int:
    if T < 1 or tau < 1:
        raise ParameterError("T and tau must be >= 1")
    if T % tau:
        warnings.warn(f"tau={tau} does not divide T={T}; using ceil(T/tau) rounds",
                      RoundingWarning, stacklevel=3)
    return -(-T // tau)


def adaped_rdp_curve(K: int, m: int, T: int, tau: int, clip_spec: ClipSpec,
                     sigma_q1: float, sigma_q2: float) -> RdpCurve:
    """RDP curve of clipped and noised adaptive distillation training.

    eps(alpha) = (K/m)^2 * 6 * rounds * alpha * (C1^2/(K s1^2) + C2^2/(K s2^2)).
    In joint mode the model and psi share threshold C1 and a single noise
    draw with scale sigma_q1.
    """
    if not 1 <= K <= m:
        raise ParameterError("need 1 <= K <= m")
    if sigma_q1 < 0 or sigma_q2 < 0:
        raise ParameterError("noise scales must be >= 0")
    rounds = _rounds(T, tau)
    if clip_spec.mode == "joint":
        if sigma_q1 == 0:
            return RdpCurve.unbounded()
        per = clip_spec.c1 ** 2 / (K * sigma_q1 ** 2)
    else:
        if sigma_q1 == 0 or sigma_q2 == 0:
            return RdpCurve.unbounded()
        per = clip_spec.c1 ** 2 / (K * sigma_q1 ** 2) + clip_spec.c2 ** 2 / (K * sigma_q2 ** 2)
    return RdpCurve.linear((K / m) ** 2 * 6.0 * rounds * per)


def adaped_rdp(alpha: float, K: int, m: int, T: int, tau: int, clip_spec: ClipSpec,
               sigma_q1: float, sigma_q2: float) -> float:
    """Point evaluation of :func:`adaped_rdp_curve`. Returns inf for zero noise."""
    if not alpha > 1:
        raise OrderError("Renyi order must exceed 1")
    curve = adaped_rdp_curve(K, m, T, tau, clip_spec, sigma_q1, sigma_q2)
    if curve.is_unbounded:
        return math.inf
    return curve(alpha)


def rdp_compose(curves: Sequence[RdpCurve]) -> RdpCurve:
    """Pointwise sum of RDP curves."""
    curves = list(curves)
    if not curves:
        raise ParameterError("need at least one curve")
    tabs = [c for c in curves if not c.is_linear]
    lin = [c.coef for c in curves if c.is_linear]
    if not tabs:
        return RdpCurve.linear(math.fsum(lin))
    orders = tabs[0].orders
    for c in tabs[1:]:
        if c.orders != orders:
            raise ParameterError("tabulated curves must share one order grid")
    # fsum is correctly rounded, so the result does not depend on the order of ``curves``
    values = [math.fsum([k * a for k in lin] + [c.values[j] for c in tabs])
              for j, a in enumerate(orders)]
    return RdpCurve.tabulated(orders, values)


# ---------------------------------------------------------------------------
# Conversion to (eps, delta)

_GRID_SIZE = 2000
_ALPHA_MIN = 1.0 + 1e-3
_ALPHA_MAX = 4096.0
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def default_orders(size: int = _GRID_SIZE) -> np.ndarray:
    return np.geomspace(_ALPHA_MIN, _ALPHA_MAX, size)


def _eps_objective(curve: RdpCurve, delta: float):
    log_inv_delta = -math.log(delta)

    def f(alpha):
        alpha = np.asarray(alpha, dtype=float)
        am1 = alpha - 1.0
        corr = (log_inv_delta + am1 * np.log1p(-1.0 / alpha) - np.log(alpha)) / am1
        return curve(alpha) + corr

    return f


def _log_delta_objective(curve: RdpCurve, epsilon: float):
    def f(alpha):
        alpha = np.asarray(alpha, dtype=float)
        am1 = alpha - 1.0
        return am1 * (curve(alpha) - epsilon) - np.log(am1) + alpha * np.log1p(-1.0 / alpha)

    return f


def _golden_refine(f, lo: float, hi: float, iters: int = 80):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = float(f(c)), float(f(d))
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = float(f(c))
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = float(f(d))
        if b - a <= 1e-12 * max(1.0, a):
            break
    return (c, fc) if fc < fd else (d, fd)


def _minimize(f, orders: np.ndarray, refine: bool):
    vals = np.asarray(f(orders), dtype=float)
    vals = np.where(np.isnan(vals), np.inf, vals)
    i = int(np.argmin(vals))
    best_alpha, best = float(orders[i]), float(vals[i])
    if not np.isfinite(best):
        raise NoBudgetError("RDP curve is infinite on the whole search grid")
    if refine:
        lo = float(orders[max(i - 1, 0)])
        hi = float(orders[min(i + 1, orders.size - 1)])
        alpha, val = _golden_refine(f, lo, hi)
        if val < best:
            best_alpha, best = alpha, val
    return best_alpha, best


def rdp_to_dp(curve: RdpCurve, delta: Optional[float] = None,
              epsilon: Optional[float] = None) -> DpBudget:
    """Convert an RDP curve to (eps, delta)-DP given exactly one of delta or eps.

    The order is searched over 2000 log-spaced points in [1.001, 4096] and the
    best bracket is refined by golden-section search. Tabulated curves are
    searched on their own grid without refinement.
    """
    if (delta is None) == (epsilon is None):
        raise ParameterError("give exactly one of delta or epsilon")
    if curve.is_unbounded:
        raise NoBudgetError("RDP curve is unbounded")
    if curve.is_linear:
        orders, refine = default_orders(), True
    else:
        orders, refine = np.asarray(curve.orders), False
    if delta is not None:
        if not 0 < delta < 1:
            raise ParameterError("delta must lie in (0, 1)")
        alpha, eps = _minimize(_eps_objective(curve, delta), orders, refine)
        return DpBudget(max(eps, 0.0), float(delta), alpha)
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    alpha, log_delta = _minimize(_log_delta_objective(curve, epsilon), orders, refine)
    return DpBudget(float(epsilon), min(math.exp(log_delta), 1.0), alpha)
