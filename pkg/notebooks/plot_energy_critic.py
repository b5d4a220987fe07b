"""
From GIWAE to the energy-based bound
====================================

On a small discrete joint every expectation can be enumerated, so the
GIWAE bound can be watched converging to IBAL as the number of samples
grows.
"""

from mibounds.models import DiscreteJoint
from mibounds.variational import TableProposal, TableCritic
from mibounds import enumeration as en

model = DiscreteJoint.random(4, 3, seed=0)
q = TableProposal.prior(model)
critic = TableCritic.random(4, 3, seed=1)

print(f"MI    {model.analytic_mi():.4f}")
print(f"BA    {en.ba_lower(model, q):.4f}")
print(f"IBAL  {en.ibal(model, q, critic):.4f}")

###############################################################################
# GIWAE(K) splits into the BA term and a contrastive term capped by log K.

for K in (1, 4, 16, 64, 256):
    total, ba, contrast = en.giwae(model, q, critic, K)
    print(f"K={K:4d}  GIWAE {total:.4f}  contrastive {contrast:.4f}")

###############################################################################
# The optimal critic closes the gap: IBAL then equals the true MI.

best = TableCritic(en.optimal_critic_table(model, q))
print(f"IBAL at optimal critic {en.ibal(model, q, best):.4f}")
