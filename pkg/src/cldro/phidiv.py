"""phi-divergences, their convex conjugates, and variational estimators.

A divergence is described by a :class:`PhiSpec`. Likelihood ratios are
nonnegative, so every ``phi`` lives on ``[0, inf)`` and conjugates are
suprema over that half-line:

    phi*(y) = sup_{x >= 0} { x*y - phi(x) }

Estimators work on a :class:`SampleSet` of critic scores. Passing
probability weights switches from Monte Carlo means to exact expectations,
which is how the discrete oracles are checked without sampling noise.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, xlogy

from ._optim import golden_section, golden_section_vec

LOG_X_RANGE = (-40.0, 40.0)
LAMBDA_MARGIN = 10.0


@dataclass(frozen=True)
class PhiSpec:
    """A convex generator with ``phi(1) = 0`` and what the solvers need from it.

    ``closed_conjugate`` and ``conjugate_argmax`` are optional; when absent
    both are computed numerically from ``phi``. ``conjugate_domain`` is the
    open interval on which the conjugate is finite. ``printed`` marks a
    conjugate taken verbatim from a formula that is not the Fenchel
    conjugate of ``phi``.
    """

    name: str
    phi: Callable
    second_deriv_at_one: float
    conjugate_domain: tuple = (-math.inf, math.inf)
    closed_conjugate: Optional[Callable] = None
    conjugate_argmax: Optional[Callable] = None
    printed: bool = False

    def conjugate(self, y):
        if self.closed_conjugate is not None:
            y = np.asarray(y, dtype=np.float64)
            lo, hi = self.conjugate_domain
            if np.any(y >= hi) or np.any(y <= lo):
                raise ValueError(f"conjugate infinite: argument outside domain of {self.name}")
            return self.closed_conjugate(y)
        return numeric_conjugate(self, y)

    def argmax(self, y):
        """The ratio ``x`` attaining the conjugate supremum, i.e. ``(phi*)'(y)``."""
        if self.conjugate_argmax is not None:
            return self.conjugate_argmax(np.asarray(y, dtype=np.float64))
        return numeric_conjugate(self, y, return_argmax=True)[1]

    @property
    def has_closed_form(self):
        return self.closed_conjugate is not None


def _kl_phi(x):
    x = np.asarray(x, dtype=np.float64)
    return xlogy(x, x) - x + 1.0


def _hellinger_conj(y):
    return y / (1.0 - y)


def _chi2_scaled(a):
    """phi(x) = a (x-1)^2 restricted to x >= 0, with its exact conjugate."""

    def phi(x):
        return a * (np.asarray(x, dtype=np.float64) - 1.0) ** 2

    def conj(y):
        y = np.asarray(y, dtype=np.float64)
        return np.where(y >= -2.0 * a, y + y**2 / (4.0 * a), -a)

    def argmax(y):
        return np.maximum(0.0, 1.0 + np.asarray(y, dtype=np.float64) / (2.0 * a))

    return phi, conj, argmax


CHI2_SCALE = 1.0 / (2.0 * math.sqrt(2.0))
DIVERGENCES = ("KL", "ChiSquared", "ModifiedChiSquared", "Hellinger")


def register_divergence(name, printed_conjugate=False):
    """Look up a divergence by name.

    ``ChiSquared`` uses ``phi(x) = (x-1)^2 / (2 sqrt 2)`` with a numerically
    derived conjugate. With ``printed_conjugate=True`` its conjugate is
    replaced by ``y + y^2``, which is not the conjugate of that ``phi``;
    keep it for comparisons only.
    """
    if name == "KL":
        return PhiSpec(
            "KL",
            _kl_phi,
            1.0,
            closed_conjugate=lambda y: np.expm1(y),
            conjugate_argmax=np.exp,
        )
    if name == "ChiSquared":
        phi, _, _ = _chi2_scaled(CHI2_SCALE)
        if printed_conjugate:
            return PhiSpec(
                "ChiSquared-printed",
                phi,
                2.0 * CHI2_SCALE,
                closed_conjugate=lambda y: y + y**2,
                conjugate_argmax=lambda y: 1.0 + 2.0 * y,
                printed=True,
            )
        return PhiSpec("ChiSquared", phi, 2.0 * CHI2_SCALE)
    if name == "ModifiedChiSquared":
        phi, conj, argmax = _chi2_scaled(1.0)
        return PhiSpec("ModifiedChiSquared", phi, 2.0, closed_conjugate=conj, conjugate_argmax=argmax)
    if name == "Hellinger":
        return PhiSpec(
            "Hellinger",
            lambda x: (np.sqrt(np.asarray(x, dtype=np.float64)) - 1.0) ** 2,
            0.5,
            conjugate_domain=(-math.inf, 1.0),
            closed_conjugate=_hellinger_conj,
            conjugate_argmax=lambda y: 1.0 / (1.0 - y) ** 2,
        )
    raise ValueError(f"unknown divergence {name!r}; known: {', '.join(DIVERGENCES)}")


def numeric_conjugate(spec: PhiSpec, y, return_argmax=False, tol=1e-10):
    """``sup_{x >= 0} x*y - phi(x)`` by golden-section search over ``log x``.

    ``x*y - phi(x)`` is concave in ``x``, hence unimodal in ``log x``. The
    boundary point ``x = 0`` is compared separately. A maximizer pinned to
    the top of the bracket means the supremum is unbounded.
    """
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.float64))
    lo_dom, hi_dom = spec.conjugate_domain
    if np.any(y_arr >= hi_dom) or np.any(y_arr <= lo_dom):
        raise ValueError(f"conjugate infinite: argument outside domain of {spec.name}")

    def neg_gap(t):
        x = np.exp(t)
        with np.errstate(over="ignore", invalid="ignore"):
            v = -(x * y_arr - spec.phi(x))
        return np.where(np.isnan(v), np.inf, v)

    lo = np.full(y_arr.shape, LOG_X_RANGE[0])
    t_best, v_best = golden_section_vec(neg_gap, lo, LOG_X_RANGE[1], xtol=tol)
    if np.any(t_best > LOG_X_RANGE[1] - 1.0):
        raise ValueError(f"conjugate infinite: supremum diverges for {spec.name}")
    value = -v_best
    x_best = np.exp(t_best)
    phi0 = float(spec.phi(0.0))
    if math.isfinite(phi0):
        at_zero = value < -phi0
        value = np.where(at_zero, -phi0, value)
        x_best = np.where(at_zero, 0.0, x_best)
    if np.ndim(y) == 0:
        value, x_best = float(value[0]), float(x_best[0])
    return (value, x_best) if return_argmax else value


def _wmean(values, weights):
    values = np.asarray(values, dtype=np.float64)
    if weights is None:
        return float(np.mean(values))
    return float(np.dot(weights, values))


def optimal_lambda(spec: PhiSpec, neg_critic_scores, tau=1.0, weights=None):
    """Minimizer of ``lambda + tau * E_Q[phi*((f - lambda)/tau)]`` over lambda.

    For KL this is ``tau * log E_Q[exp(f/tau)]``, returned in closed form.
    """
    f = np.asarray(neg_critic_scores, dtype=np.float64).ravel()
    w = None if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if not np.all(np.isfinite(f)):
        raise ValueError("critic scores must be finite")
    if spec.name == "KL":
        if w is None:
            return float(tau * (logsumexp(f / tau) - math.log(f.size)))
        return float(tau * logsumexp(f / tau, b=w))

    lo, hi = f.min() - LAMBDA_MARGIN, f.max() + LAMBDA_MARGIN
    dom_hi = spec.conjugate_domain[1]
    if math.isfinite(dom_hi):
        # (f - lambda)/tau < dom_hi  <=>  lambda > max f - tau*dom_hi
        lo = max(lo, f.max() - tau * dom_hi + 1e-12 * max(1.0, abs(f.max())))

    def objective(lam):
        y = (f - lam) / tau
        if np.any(y >= dom_hi):
            return math.inf
        return lam + tau * _wmean(spec.conjugate(y), w)

    lam, _ = golden_section(objective, lo, hi, xtol=1e-10)
    return float(lam)


@dataclass(frozen=True)
class SampleSet:
    """Critic scores on samples from P (``pos``) and from Q (``neg``).

    Optional weights turn the sample means into exact expectations.
    """

    pos_scores: np.ndarray
    neg_scores: np.ndarray
    pos_weights: Optional[np.ndarray] = None
    neg_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        for attr in ("pos_scores", "neg_scores", "pos_weights", "neg_weights"):
            v = getattr(self, attr)
            if v is not None:
                object.__setattr__(self, attr, np.asarray(v, dtype=np.float64).ravel())
        if self.pos_scores.size == 0 or self.neg_scores.size == 0:
            raise ValueError("both sample sets must be nonempty")
        for s, w in ((self.pos_scores, self.pos_weights), (self.neg_scores, self.neg_weights)):
            if w is not None and (w.shape != s.shape or abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0)):
                raise ValueError("weights must be a probability vector matching the scores")

    @classmethod
    def from_critic(cls, critic, pos_samples, neg_samples, pos_weights=None, neg_weights=None):
        pos = np.array([critic(s) for s in pos_samples], dtype=np.float64)
        neg = np.array([critic(s) for s in neg_samples], dtype=np.float64)
        return cls(pos, neg, pos_weights, neg_weights)

    @classmethod
    def discrete(cls, critic_table, p, q):
        """Exact-expectation set for distributions ``p``, ``q`` over outcomes."""
        f = np.asarray(critic_table, dtype=np.float64)
        return cls(f, f, np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64))

    def mean_pos(self):
        return _wmean(self.pos_scores, self.pos_weights)

    def mean_neg(self, values=None):
        return _wmean(self.neg_scores if values is None else values, self.neg_weights)


def tight_variational_divergence(spec: PhiSpec, samples: SampleSet):
    """``E_P f - min_lambda {lambda + E_Q phi*(f - lambda)}`` for a fixed critic.

    A lower bound on ``D_phi(P || Q)`` for every critic; for KL it equals
    ``E_P f - log E_Q exp(f)``.
    """
    lam = optimal_lambda(spec, samples.neg_scores, 1.0, samples.neg_weights)
    inner = lam + samples.mean_neg(spec.conjugate(samples.neg_scores - lam))
    return samples.mean_pos() - inner


def dv_divergence(spec: PhiSpec, samples: SampleSet):
    """The lambda-free bound ``E_P f - E_Q phi*(f)``."""
    return samples.mean_pos() - samples.mean_neg(spec.conjugate(samples.neg_scores))


def chi2_variational(samples: SampleSet):
    """``E_P f - E_Q f - Var_Q f`` (population variance under Q)."""
    m = samples.mean_neg()
    var = samples.mean_neg((samples.neg_scores - m) ** 2)
    return samples.mean_pos() - m - var


def discrete_divergence(spec: PhiSpec, p, q):
    """Exact ``sum_k q_k phi(p_k / q_k)`` for discrete distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q == 0) & (p > 0)):
        return math.inf
    mask = q > 0
    return float(np.sum(q[mask] * spec.phi(p[mask] / q[mask])))


def tabular_critic_ascent(spec: PhiSpec, p, q, sweeps=200, tol=1e-13, init=None):
    """Maximize the tight objective over a free critic value per outcome.

    Coordinate ascent on the jointly concave function
    ``E_P f - lambda - E_Q phi*(f - lambda)``: each sweep updates every
    outcome's value by a 1-D Brent search, then re-solves lambda. Returns
    ``(critic_table, tight_value)`` with the value recomputed through
    :func:`tight_variational_divergence`.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    f = np.zeros_like(p) if init is None else np.array(init, dtype=np.float64)
    lam = optimal_lambda(spec, f, 1.0, q)
    dom_hi = spec.conjugate_domain[1]

    def coord_obj(t, k, lam):
        y = t - lam
        if y >= dom_hi:
            return math.inf
        return -(p[k] * t - q[k] * float(spec.conjugate(y)))

    prev = -math.inf
    for _ in range(sweeps):
        for k in range(p.size):
            if math.isfinite(dom_hi):
                # bounded search strictly inside the conjugate domain
                top = lam + dom_hi - 1e-12
                bounds = (min(f[k], top - 1.0) - 50.0, top)
                res = minimize_scalar(coord_obj, bounds=bounds, args=(k, lam), method="bounded",
                                      options={"xatol": 1e-12})
            else:
                res = minimize_scalar(coord_obj, bracket=(f[k] - 1.0, f[k] + 1.0), args=(k, lam), tol=1e-12)
            f[k] = res.x
        lam = optimal_lambda(spec, f, 1.0, q)
        val = tight_variational_divergence(spec, SampleSet.discrete(f, p, q))
        if abs(val - prev) < tol:
            break
        prev = val
    return f, val
