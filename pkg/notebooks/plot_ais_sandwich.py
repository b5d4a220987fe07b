"""
Annealed sandwich bounds
========================

Longer annealing chains close the gap between the upper and lower AIS
bounds. With the perfect transition kernel the gap falls like 1/T.
"""

import numpy as np

from mibounds.models import LinearGaussianVAE
from mibounds import ais_engine as ae
from mibounds import multisample_ais as ms

model = LinearGaussianVAE.random(3, 6, seed=0)
mi = model.analytic_mi()
kernel = ae.kernel_from_name("perfect", discrete=False)

###############################################################################
# Every estimator starts from the same joint draws for a given seed, so the
# sample mean of log p(x|z) - log p(x) on those draws is the reference the
# bounds bracket. It differs from the analytic MI by Monte Carlo noise.

x, z = model.sample_joint(64, np.random.default_rng(2))
ref = np.mean(model.log_likelihood(x, z) - model.log_evidence(x))
print(f"analytic MI {mi:.3f}  sample reference {ref:.3f}")

###############################################################################
# Each row runs the single-sample sandwich on a linear schedule.

for T in (10, 100, 1000):
    path = ms.default_path(model, T)
    out = ms.ais_bounds(model, path, kernel, T, 64, seed=2)
    print(f"T={T:5d}  lower {out.lower_mi.value:7.3f}  upper {out.upper_mi.value:7.3f}"
          f"  gap {out.gap:7.4f}")

###############################################################################
# The multi-sample variants share one interface. Here IM-AIS and CR-AIS run
# with K = 8 chains on the same path.

path = ms.default_path(model, 100)
for name in ("im_ais", "cr_ais"):
    out = ms.ESTIMATORS[name](model, path, kernel, 8, 100, 64, 3)
    print(f"{name}  lower {out.lower_mi.value:7.3f}  upper {out.upper_mi.value:7.3f}")
