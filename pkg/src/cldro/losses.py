"""InfoNCE and its DRO-derived relatives, with analytic score gradients.

All losses take a :class:`~cldro.scores.ScoreBatch` and return a
:class:`LossValue` whose ``value`` is the mean over anchors. The InfoNCE
denominator is the *mean* over negatives, so a batch with all scores equal
has loss exactly zero.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import logsumexp, softmax

from .scores import ScoreBatch

WEIGHT_SUM_TOL = 1e-9


class LossKind(str, Enum):
    INFONCE = "infonce"
    BASIC = "basic"
    MEAN_VARIANCE = "mean_variance"
    ADNCE = "adnce"


class WeightFamily(str, Enum):
    GAUSSIAN = "gaussian"
    GAMMA = "gamma"
    RAYLEIGH = "rayleigh"
    CHI_SQUARED = "chi_squared"


@dataclass(frozen=True)
class LossConfig:
    """Which loss to use and its hyperparameters.

    ``mu``/``sigma`` parameterize the Gaussian ADNCE kernel; ``m``/``n`` the
    alternative families (Gamma uses both, Rayleigh and chi-squared only
    ``m``). ``phi_second_deriv`` is the curvature used by the mean-variance
    loss (1 for KL).
    """

    kind: LossKind = LossKind.INFONCE
    tau: float = 0.5
    mu: float = 0.5
    sigma: float = 1.0
    weight_family: WeightFamily = WeightFamily.GAUSSIAN
    m: float = 2.0
    n: float = 1.0
    phi_second_deriv: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "weight_family", WeightFamily(self.weight_family))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not (self.m > 0 and self.n > 0):
            raise ValueError("weight family parameters m and n must be positive")
        if not self.phi_second_deriv > 0:
            raise ValueError("phi_second_deriv must be positive")

    def weights(self, neg_scores):
        """ADNCE weights for each anchor's negatives (rows sum to one)."""
        if self.weight_family is WeightFamily.GAUSSIAN:
            return adnce_weights(neg_scores, self.mu, self.sigma)
        return alternative_weights(neg_scores, self.weight_family, self.m, self.n)


@dataclass(frozen=True)
class LossValue:
    value: float
    per_anchor: np.ndarray = field(repr=False)


def _loss_value(per_anchor):
    per_anchor = np.asarray(per_anchor, dtype=np.float64)
    # fixed left-to-right accumulation keeps the mean independent of array layout
    total = 0.0
    for v in per_anchor:
        total += v
    return LossValue(total / per_anchor.size, per_anchor)


def _check_tau(tau):
    if not tau > 0:
        raise ValueError("tau must be positive")


def log_mean_exp(x, axis=-1, b=None):
    """``log(mean(b * exp(x)))`` along ``axis``, stabilized.

    With ``b`` given it must already be normalized weights, in which case
    this is ``log(sum(b * exp(x)))``.
    """
    x = np.asarray(x, dtype=np.float64)
    if b is None:
        return logsumexp(x, axis=axis) - np.log(x.shape[axis])
    return logsumexp(x, axis=axis, b=b)


def infonce(batch: ScoreBatch, tau):
    _check_tau(tau)
    per = -(batch.pos / tau - log_mean_exp(batch.neg / tau, axis=1))
    return _loss_value(per)


def basic_loss(batch: ScoreBatch):
    return _loss_value(-batch.pos + batch.neg.mean(axis=1))


def mean_variance_loss(batch: ScoreBatch, tau, phi_second_deriv_at_one=1.0):
    """Second-order (mean plus variance penalty) surrogate of CL-DRO.

    The variance is the population variance over each anchor's negatives.
    """
    _check_tau(tau)
    if not phi_second_deriv_at_one > 0:
        raise ValueError("phi_second_deriv_at_one must be positive")
    var = batch.neg.var(axis=1)
    per = -batch.pos + batch.neg.mean(axis=1) + var / (2.0 * tau * phi_second_deriv_at_one)
    return _loss_value(per)


def _normalize_rows(log_w):
    if np.any(np.all(np.isneginf(log_w), axis=-1)):
        raise ValueError("weight singularity: every weight in a row is zero")
    return softmax(log_w, axis=-1)


def adnce_weights(neg_scores, mu, sigma=1.0):
    """Gaussian kernel weights centered at ``mu``, normalized per row.

    The 1/(sigma*sqrt(2*pi)) factor cancels in the normalization.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s = np.asarray(neg_scores, dtype=np.float64)
    return _normalize_rows(-0.5 * ((s - mu) / sigma) ** 2)


def _log_power(x, power):
    """``power * log(x)`` with the conventions 0**0 = 1 and 0**p = 0 for p > 0."""
    if power == 0:
        return np.zeros_like(x)
    with np.errstate(divide="ignore"):
        return power * np.log(x)


def alternative_weights(neg_scores, family, m, n=1.0):
    """Gamma, Rayleigh or chi-squared shaped weights on ``x = score + 1``.

    Normalizing constants of the densities cancel, so only the
    x-dependent factors are evaluated (in log space).
    """
    family = WeightFamily(family)
    if not (m > 0 and n > 0):
        raise ValueError("weight family parameters m and n must be positive")
    x = np.asarray(neg_scores, dtype=np.float64) + 1.0
    if np.any(x < 0):
        raise ValueError("weight singularity: shifted score outside (0, inf); scores must be >= -1")
    if family is WeightFamily.GAUSSIAN:
        return adnce_weights(neg_scores, m, n)
    if family is WeightFamily.GAMMA:
        power, log_decay = m - 1.0, -x / n
    elif family is WeightFamily.RAYLEIGH:
        power, log_decay = 1.0, -(x**2) / (2.0 * m**2)
    else:
        power, log_decay = m / 2.0 - 1.0, -x / 2.0
    if power < 0 and np.any(x == 0):
        raise ValueError("weight singularity: density diverges at shifted score 0")
    return _normalize_rows(_log_power(x, power) + log_decay)


def _check_weights(weights, shape):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    w = np.broadcast_to(w, shape)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > WEIGHT_SUM_TOL):
        raise ValueError("weights must sum to 1 per anchor (tolerance 1e-9)")
    return w


def adnce(batch: ScoreBatch, tau, weights):
    """InfoNCE with the uniform negative average replaced by ``weights``."""
    _check_tau(tau)
    w = _check_weights(weights, batch.neg.shape)
    per = -batch.pos / tau + logsumexp(batch.neg / tau, axis=1, b=w)
    return _loss_value(per)


def loss_value(config: LossConfig, batch: ScoreBatch, weights=None):
    if config.kind is LossKind.INFONCE:
        return infonce(batch, config.tau)
    if config.kind is LossKind.BASIC:
        return basic_loss(batch)
    if config.kind is LossKind.MEAN_VARIANCE:
        return mean_variance_loss(batch, config.tau, config.phi_second_deriv)
    if weights is None:
        weights = config.weights(batch.neg)
    return adnce(batch, config.tau, weights)


def loss_gradient(config: LossConfig, batch: ScoreBatch, weights=None):
    """Gradient of ``loss_value(config, batch).value`` w.r.t. every score.

    Returns ``(d_pos, d_neg)`` with the shapes of ``batch.pos`` and
    ``batch.neg``. ADNCE weights are held fixed (treated as data).
    """
    A, N = batch.neg.shape
    tau = config.tau
    if config.kind is LossKind.INFONCE:
        d_pos = np.full(A, -1.0 / tau)
        d_neg = softmax(batch.neg / tau, axis=1) / tau
    elif config.kind is LossKind.BASIC:
        d_pos = np.full(A, -1.0)
        d_neg = np.full((A, N), 1.0 / N)
    elif config.kind is LossKind.MEAN_VARIANCE:
        centered = batch.neg - batch.neg.mean(axis=1, keepdims=True)
        d_pos = np.full(A, -1.0)
        d_neg = 1.0 / N + centered / (N * tau * config.phi_second_deriv)
    else:
        if weights is None:
            weights = config.weights(batch.neg)
        w = _check_weights(weights, batch.neg.shape)
        d_pos = np.full(A, -1.0 / tau)
        logits = batch.neg / tau + np.log(np.where(w > 0, w, 1.0))
        logits = np.where(w > 0, logits, -np.inf)
        d_neg = softmax(logits, axis=1) / tau
    return d_pos / A, d_neg / A
