"""Temperature as a Lagrange multiplier.

Walks through one anchor: the worst case over a KL ball around the uniform
negative distribution, the dual temperature that produces it, and the
identity linking the robust loss to a scaled InfoNCE.
"""

import numpy as np

from cldro import dro
from cldro.losses import infonce
from cldro.scores import ScoreBatch

rng = np.random.default_rng(0)
pos = 0.8
neg = rng.uniform(-1, 1, 16)  # cosine scores of 16 negatives

# the robust radius eta bounds how far the adversary may move away from uniform
for eta in (0.05, 0.2, 1.0):
    sol = dro.worst_case_weights_constrained(neg, dro.DroConstraint(eta))
    dual = dro.optimal_alpha(neg, eta)
    print(f"eta={eta:<5} alpha*={dual.alpha_star:.4f}  sqrt(V/2eta)={dro.alpha_variance_approx(neg, eta):.4f}"
          f"  KL(Q*)={sol.achieved_divergence:.6f}  E_Q*[f]={sol.objective:.4f}")

# the worst case is a softmax tilt, so it puts the most mass on the hardest negatives
eta = 0.2
sol = dro.worst_case_weights_constrained(neg, dro.DroConstraint(eta))
order = np.argsort(neg)[::-1]
print("\nhardest negatives and their worst-case weight (uniform is 1/16 = 0.0625)")
for i in order[:4]:
    print(f"  score {neg[i]:+.3f}  weight {sol.worst_case[i]:.4f}")

# robust loss equals alpha* times InfoNCE at temperature alpha*, plus alpha* eta
batch = ScoreBatch(np.array([pos]), neg[None, :])
alpha = dro.optimal_alpha(neg, eta).alpha_star
robust = dro.cl_dro_loss(batch, dro.DroConstraint(eta)).value
scaled = alpha * infonce(batch, alpha).value + alpha * eta
print(f"\nCL-DRO {robust:.12f}\nalpha* InfoNCE + alpha* eta {scaled:.12f}\ngap {abs(robust - scaled):.1e}")
