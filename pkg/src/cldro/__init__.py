"""Contrastive learning as distributionally robust optimization.

Submodules: :mod:`scores` (cosine scores and score batches), :mod:`losses`
(InfoNCE and its mean-variance and ADNCE relatives), :mod:`dro` (the KL
dual, worst-case weights and the generalization bound), :mod:`phidiv`
(phi-divergences and variational bounds), :mod:`mi` (Gaussian MI
estimation), :mod:`toytrain` (synthetic contrastive training) and
:mod:`cli`.
"""

__version__ = "0.1.0"
