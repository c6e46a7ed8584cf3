"""Shrinking client means toward the population mean.

Draws a Gaussian population, compares local, global and personalized
estimates, then repeats the personalized estimate when each client can only
send a quantized or locally private version of its mean.
"""

import math
import warnings

import numpy as np

from fedbayes import GaussianPrior, MechanismSpec, sample_gaussian_population
from fedbayes.gauss_est import (clip_radius_b, constrained_personalized_gaussian, mse_with_se,
                                personalized_gaussian, shrinkage_weight)

m, n, d = 2000, 10, 3
st, sx = 0.05, 1.0
prior = GaussianPrior(np.array([1.0, -0.5, 0.0]), st, sx)
data = sample_gaussian_population(prior, m, n, rng=0)

a = shrinkage_weight(st, sx, n)
pers = personalized_gaussian(data, a)
local = mse_with_se(data.means(), data.true_params)[0]
glob = mse_with_se(np.broadcast_to(data.means().mean(axis=0), (m, d)), data.true_params)[0]
print(f"weight a = {a:.3f}")
print(f"local MSE        {local:.4f}")
print(f"global MSE       {glob:.4f}")
print(f"personalized MSE {pers.mse:.4f}  (theory {pers.theoretical_mse:.4f})")

b = clip_radius_b(float(np.abs(prior.mu).max()), math.sqrt(st), math.sqrt(sx), n, m)
print(f"\nprojection radius b = {b:.3f}")
for bits in (1, 2, 4, 8):
    rep = constrained_personalized_gaussian(data, MechanismSpec.quantizer(bits, b), rng=0)
    print(f"{bits}-bit quantizer: MSE {rep.mse:.4f}")
with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # eps0 >= 1 is outside the derived regime
    for eps in (0.5, 1.0, 4.0):
        rep = constrained_personalized_gaussian(data, MechanismSpec.gaussian_ldp(eps, 1e-5, b), rng=0)
        print(f"Gaussian LDP eps0={eps}: MSE {rep.mse:.4f}")
