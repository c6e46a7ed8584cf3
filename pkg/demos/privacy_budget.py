"""Privacy budget of clipped and noised distillation training, as a function
of the client sampling ratio and the noise scale.
"""

from fedbayes import ClipSpec, rdp_to_dp
from fedbayes.privacy import adaped_rdp_curve

m, T, tau, delta = 1000, 200, 5, 1e-5
clip = ClipSpec(1.0, 1.0)
print(" K/m   sigma   eps(delta=1e-5)   best alpha")
for K in (10, 50, 100, 300):
    for sigma in (1.0, 2.0, 4.0):
        curve = adaped_rdp_curve(K, m, T, tau, clip, sigma, sigma)
        budget = rdp_to_dp(curve, delta=delta)
        print(f"{K / m:4.2f}  {sigma:6.1f}   {budget.epsilon:14.4f}   {budget.alpha_star:10.2f}")
