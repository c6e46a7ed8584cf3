"""Regenerate the frozen oracle values used by the test suite.

The values are computed without importing fedbayes: the accountant table
with exact rational arithmetic, the remaining constants with mpmath at
50 digits. Run from the repository root:

    python3 tests/data/make_oracles.py
"""

import json
import random
from fractions import Fraction
from pathlib import Path

import mpmath as mp

mp.mp.dps = 50
HERE = Path(__file__).resolve().parent


def rdp_table(cases=50, seed=20240611):
    rnd = random.Random(seed)
    rows = []
    for _ in range(cases):
        m = rnd.randint(2, 500)
        K = rnd.randint(1, m)
        tau = rnd.randint(1, 20)
        T = tau * rnd.randint(1, 50)
        alpha = Fraction(rnd.randint(101, 6400), 100)
        c1 = Fraction(rnd.randint(1, 400), 100)
        c2 = Fraction(rnd.randint(1, 400), 100)
        s1 = Fraction(rnd.randint(10, 800), 100)
        s2 = Fraction(rnd.randint(10, 800), 100)
        eps = Fraction(K, m) ** 2 * 6 * Fraction(T, tau) * alpha * (
            c1 ** 2 / (K * s1 ** 2) + c2 ** 2 / (K * s2 ** 2))
        rows.append({"K": K, "m": m, "T": T, "tau": tau, "alpha": float(alpha),
                     "c1": float(c1), "c2": float(c2), "sigma_q1": float(s1),
                     "sigma_q2": float(s2), "epsilon": float(eps)})
    return rows


def kd_density_integral():
    # |X| = 1, p_mu = 1/2, psi p(x) = 1: c(psi) exp(-psi KL(1/2 || q)) over q in [0, 1]
    c = mp.mpf(1)
    h = mp.log(2)
    # KL(1/2 || q) = -log 2 - log sqrt(q (1 - q))
    unnorm = mp.quad(lambda q: mp.exp(c * (h + mp.log(mp.sqrt(q * (1 - q))))), [0, 1])
    log_norm = -mp.log(mp.beta(mp.mpf(3) / 2, mp.mpf(3) / 2)) - c * h
    return {"unnormalized_integral": float(unnorm),
            "log_normalizer": float(log_norm),
            "normalized_integral": float(unnorm * mp.exp(log_norm))}


def main():
    out = {
        "rdp_table": rdp_table(),
        "kd_density_half": kd_density_integral(),
        "kd_example": float(mp.mpf("0.8") * mp.log(mp.mpf("1.6")) + mp.mpf("0.2") * mp.log(mp.mpf("0.4"))),
        "posterior_weight_example": float(1 / (1 + mp.exp(-2))),
        "mse_known_beta22_n10": float(mp.mpf(1) / 70),
    }
    (HERE / "oracles.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
