"""
Static bounds on a linear Gaussian VAE
======================================

The prior is used as the proposal, so every lower bound is capped by log K
while the upper bounds start far above the true mutual information.
"""

import numpy as np

from mibounds.models import LinearGaussianVAE
from mibounds.variational import PriorProposal
from mibounds import bounds_static as bs

model = LinearGaussianVAE.random(5, 20, seed=0)
q = PriorProposal(model)
print(f"analytic MI {model.analytic_mi():.3f}")

###############################################################################
# The BA lower bound with the prior proposal is exactly zero, and the IWAE
# lower bound can climb at most log K nats above it.

for K in (1, 10, 100, 1000):
    lo, _ = bs.iwae_lower_mi(model, q, K, 64, seed=1)
    up = bs.iwae_upper_mi(model, q, K, 64, seed=1)
    print(f"K={K:5d}  lower {lo.value:7.3f}  upper {up.value:8.3f}  log K {np.log(K):6.3f}")
