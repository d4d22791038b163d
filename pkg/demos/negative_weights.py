"""How each loss weights a negative as a function of its score.

InfoNCE weights grow exponentially with the score, so the hardest negatives
(often false negatives) dominate. ADNCE multiplies in a Gaussian bump at mu,
moving the emphasis away from the extreme end.
"""

import numpy as np

from cldro.losses import adnce_weights, alternative_weights

s = np.linspace(-1, 1, 9)
tau = 0.5
tilt = np.exp(s / tau)
columns = {"infonce": tilt}
for mu in (0.1, 0.5, 0.9):
    columns[f"adnce mu={mu}"] = adnce_weights(s, mu, 0.5) * tilt
columns["gamma m=2"] = alternative_weights(s, "gamma", 2.0, 1.0) * tilt
columns = {k: v / v.sum() for k, v in columns.items()}

print("score  " + "".join(f"{k:>14}" for k in columns))
for i, x in enumerate(s):
    print(f"{x:+.2f}  " + "".join(f"{v[i]:>14.4f}" for v in columns.values()))
