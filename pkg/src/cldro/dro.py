"""Distributionally robust optimization over the negative-sample weights.

For one anchor with negative scores ``f`` (uniform nominal ``Q0`` over the
N negatives) the robust inner problem is

    max_Q  E_Q[f]   s.t.  D_phi(Q || Q0) <= eta,

whose KL dual is ``min_{alpha > 0} alpha*eta + alpha*log E_Q0[exp(f/alpha)]``.
The maximizing ``Q`` is the exponential tilt of ``Q0`` at the optimal
``alpha``, which is what makes InfoNCE at temperature ``alpha*`` the same
objective up to the constant ``alpha* eta``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp, softmax, xlogy

from ._optim import golden_section
from .losses import LossValue, _loss_value
from .phidiv import PhiSpec, register_divergence
from .scores import ScoreBatch

ALPHA_BRACKET = (1e-4, 1e4)
RADIUS_TOL = 1e-8
SIMPLEX_TOL = 1e-9

KL = register_divergence("KL")


def check_weights(q, n=None):
    """Validate a probability vector over negatives and return it as an array."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or (n is not None and q.size != n):
        raise ValueError("weight vector has the wrong shape")
    if np.any(q < -SIMPLEX_TOL) or abs(q.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("weights are not a probability vector")
    return q


@dataclass(frozen=True)
class DroConstraint:
    eta: float
    phi: PhiSpec = KL

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")


@dataclass(frozen=True)
class DualSolution:
    """Solver output for one anchor.

    ``objective`` is the primal value ``E_{Q*}[f]``, ``dual_objective`` the
    value of the dual at ``alpha_star``. ``beta_star`` is the normalization
    multiplier, ``-alpha* log E_Q0 exp(f/alpha*)`` for KL, and
    ``lambda_star = -beta_star``. ``degenerate`` flags constant scores
    (no interior minimizer) and a slack constraint.
    """

    alpha_star: float
    beta_star: float
    lambda_star: float
    achieved_divergence: float
    worst_case: np.ndarray = field(repr=False)
    objective: float
    dual_objective: float = math.nan
    degenerate: bool = False


@dataclass(frozen=True)
class BoundParams:
    rho: float = 0.05
    N: int = 256
    tau: float = 0.5
    M1: float = -1.0
    M2: float = 1.0
    hypothesis_count: float = 1e6

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.M1 < self.M2:
            raise ValueError("M1 must be smaller than M2")
        if not (self.N >= 1 and self.tau > 0 and self.hypothesis_count > 0):
            raise ValueError("N, tau and hypothesis_count must be positive")


def kl_divergence(q, q0=None):
    """``sum q log(q/q0)`` with ``0 log 0 = 0``; ``q0`` defaults to uniform."""
    q = np.asarray(q, dtype=np.float64)
    q0 = np.full(q.shape, 1.0 / q.size) if q0 is None else np.asarray(q0, dtype=np.float64)
    if np.any((q0 == 0) & (q > 0)):
        raise ValueError("q is not absolutely continuous with respect to q0")
    mask = q > 0
    return max(0.0, float(np.sum(xlogy(q[mask], q[mask] / q0[mask]))))


def worst_case_weights_kl(neg_scores, tau):
    """Exponential tilt of the uniform distribution: ``softmax(f / tau)``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return softmax(np.asarray(neg_scores, dtype=np.float64) / tau, axis=-1)


def dual_objective_kl(neg_scores, alpha, eta):
    f = np.asarray(neg_scores, dtype=np.float64)
    return alpha * eta + alpha * (logsumexp(f / alpha) - math.log(f.size))


def _argmax_face(f):
    """Uniform weights over the maximizers of ``f``."""
    top = f == f.max()
    return top / top.sum()


def _solution_from_tilt(f, inv_alpha, eta, degenerate=False):
    q = softmax(f * inv_alpha)
    alpha = math.inf if inv_alpha == 0 else 1.0 / inv_alpha
    lam = float(f.mean()) if inv_alpha == 0 else float(alpha * (logsumexp(f * inv_alpha) - math.log(f.size)))
    dual = lam if inv_alpha == 0 else alpha * eta + lam
    return DualSolution(
        alpha_star=alpha,
        beta_star=-lam,
        lambda_star=lam,
        achieved_divergence=kl_divergence(q),
        worst_case=q,
        objective=float(np.dot(q, f)),
        dual_objective=float(dual),
        degenerate=degenerate,
    )


def _constrained_kl(f, eta):
    n = f.size
    face = _argmax_face(f)
    max_div = math.log(n / np.count_nonzero(face))
    if eta == 0 or max_div == 0:
        return _solution_from_tilt(f, 0.0, eta, degenerate=max_div == 0)
    if eta >= max_div:
        return DualSolution(
            alpha_star=0.0,
            beta_star=-float(f.max()),
            lambda_star=float(f.max()),
            achieved_divergence=max_div,
            worst_case=face,
            objective=float(f.max()),
            dual_objective=float(f.max()),
            degenerate=True,
        )

    # KL of the tilt grows monotonically with the inverse temperature
    def gap(b):
        return kl_divergence(softmax(f * b)) - eta

    spread = float(f.max() - f.min())
    hi = 1.0 / spread
    while gap(hi) < 0:
        hi *= 2.0
    b = brentq(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return _solution_from_tilt(f, b, eta)


def _generic_ratios(spec, f, alpha):
    """Optimal likelihood ratios at multiplier ``alpha`` with beta normalizing them."""

    def mass(beta):
        return float(np.mean(spec.argmax((f + beta) / alpha))) - 1.0

    spread = float(f.max() - f.min()) + 1.0
    lo, hi = -f.max() - alpha, -f.min()
    dom_hi = spec.conjugate_domain[1]
    if math.isfinite(dom_hi):
        hi = min(hi, alpha * dom_hi - f.max() - 1e-12 * spread)
    while mass(lo) > 0:
        lo -= spread
    while mass(hi) < 0:
        hi = hi + spread if not math.isfinite(dom_hi) else (hi + alpha * dom_hi - f.max()) / 2
    beta = brentq(mass, lo, hi, xtol=1e-14, maxiter=500)
    L = spec.argmax((f + beta) / alpha)
    return L / L.mean(), beta


def _constrained_generic(spec, f, eta):
    n = f.size
    face = _argmax_face(f)
    k = np.count_nonzero(face)
    max_div = (k / n) * float(spec.phi(n / k)) + (1 - k / n) * float(spec.phi(0.0))
    if eta == 0 or f.max() == f.min():
        q = np.full(n, 1.0 / n)
        return DualSolution(math.inf, -float(f.mean()), float(f.mean()), 0.0, q, float(f.mean()),
                            float(f.mean()), f.max() == f.min())
    if eta >= max_div:
        return DualSolution(0.0, -float(f.max()), float(f.max()), max_div, face, float(f.max()),
                            float(f.max()), True)

    def divergence(inv_alpha):
        L, _ = _generic_ratios(spec, f, 1.0 / inv_alpha)
        return float(np.mean(spec.phi(L)))

    lo, hi = 1e-8, 1.0 / (f.max() - f.min())
    while divergence(hi) < eta:
        hi *= 2.0
    b = brentq(lambda t: divergence(t) - eta, lo, hi, xtol=1e-14, maxiter=500)
    L, beta = _generic_ratios(spec, f, 1.0 / b)
    q = L / n
    alpha = 1.0 / b
    dual = alpha * eta - beta + alpha * float(np.mean(spec.conjugate((f + beta) / alpha)))
    return DualSolution(alpha, beta, -beta, float(np.mean(spec.phi(L))), q, float(np.dot(q, f)), dual)


def worst_case_weights_constrained(neg_scores, constraint: DroConstraint):
    """Solve the radius-constrained worst case exactly.

    KL: root-find the inverse temperature whose tilt has divergence ``eta``.
    Other divergences: the same outer root-find, with the ratios at each
    multiplier obtained from the conjugate's maximizer.
    """
    f = np.asarray(neg_scores, dtype=np.float64).ravel()
    if f.size == 0 or not np.all(np.isfinite(f)):
        raise ValueError("scores must be finite and nonempty")
    if constraint.phi.name == "KL":
        return _constrained_kl(f, constraint.eta)
    return _constrained_generic(constraint.phi, f, constraint.eta)


def optimal_alpha(neg_scores, eta):
    """Minimize the KL dual over ``alpha`` by golden-section search in ``log alpha``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    f = np.asarray(neg_scores, dtype=np.float64).ravel()
    lo, hi = math.log(ALPHA_BRACKET[0]), math.log(ALPHA_BRACKET[1])
    if f.max() == f.min():
        alpha = ALPHA_BRACKET[0]
        return _solution_from_tilt(f, 1.0 / alpha, eta, degenerate=True)
    # relative width 1e-10 in alpha is an absolute width 1e-10 in log alpha
    t, _ = golden_section(lambda t: dual_objective_kl(f, math.exp(t), eta), lo, hi, xtol=1e-10)
    alpha = math.exp(t)
    sol = _solution_from_tilt(f, 1.0 / alpha, eta)
    return replace(sol, alpha_star=alpha, degenerate=t <= lo + 1e-9)


def alpha_variance_approx(neg_scores, eta):
    """``sqrt(Var_Q0[f] / (2 eta))``, the small-radius estimate of ``alpha*``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    var = float(np.var(np.asarray(neg_scores, dtype=np.float64)))
    if var == 0:
        raise ValueError("approximation undefined for zero-variance scores")
    return math.sqrt(var / (2.0 * eta))


def cl_dro_loss(batch: ScoreBatch, constraint: DroConstraint) -> LossValue:
    per = np.array(
        [
            -p + worst_case_weights_constrained(row, constraint).objective
            for p, row in zip(batch.pos, batch.neg)
        ]
    )
    return _loss_value(per)


def infonce_dual_form(pos, neg_scores, alpha, eta):
    """``alpha * InfoNCE_alpha + alpha * eta`` for one anchor."""
    f = np.asarray(neg_scores, dtype=np.float64)
    infonce_alpha = -pos / alpha + (logsumexp(f / alpha) - math.log(f.size))
    return alpha * infonce_alpha + alpha * eta


def equivalence_gaps(batch: ScoreBatch, eta):
    """Per-anchor |CL-DRO - (alpha* InfoNCE_{alpha*} + alpha* eta)|."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    lhs = cl_dro_loss(batch, DroConstraint(eta)).per_anchor
    gaps = np.empty(batch.num_anchors)
    for i, (p, row) in enumerate(zip(batch.pos, batch.neg)):
        alpha = optimal_alpha(row, eta).alpha_star
        gaps[i] = abs(lhs[i] - infonce_dual_form(p, row, alpha, eta))
    return gaps


def equivalence_gap(batch: ScoreBatch, eta):
    return float(equivalence_gaps(batch, eta).max())


def generalization_bound(params: BoundParams):
    """The high-probability gap between the unbiased loss and tau * InfoNCE.

    ``M2 e^{d} / (N - 1 + e^{d})`` is evaluated as ``M2 / ((N-1) e^{-d} + 1)``
    with ``d = (M2 - M1)/tau``, which cannot overflow.
    """
    d = (params.M2 - params.M1) / params.tau
    lead = params.M2 / ((params.N - 1) * math.exp(-d) + 1.0)
    return lead * math.sqrt(params.N / 2.0 * math.log(2.0 * params.hypothesis_count / params.rho))


# -- independent oracles --------------------------------------------------


def _euclid_simplex_projection(z):
    """Row-wise Euclidean projection onto the probability simplex."""
    n = z.shape[-1]
    u = -np.sort(-z, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    r = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, r[..., None], -1) / (r[..., None] + 1.0)
    return np.maximum(z - theta, 0.0)


def _kl_rows(q):
    n = q.shape[-1]
    return np.sum(xlogy(q, q * n), axis=-1)


def project_kl_ball(z, eta, iters=100):
    """Euclidean projection of rows of ``z`` onto {simplex, KL(q||uniform) <= eta}.

    With multipliers ``nu`` (KL) and ``kappa`` (mass) the stationarity
    condition ``q + nu log q = c`` is solved by the Wright omega function;
    ``kappa`` by Newton, ``nu`` by bisection on the achieved divergence.
    """
    from scipy.special import wrightomega

    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    rows, n = z.shape
    out = _euclid_simplex_projection(z)
    active = _kl_rows(out) > eta
    if not np.any(active):
        return out
    za = z[active]

    def ratios(nu, kappa):
        # q + nu (log(n q) + 1) + kappa = z  ->  q/nu + log(q/nu) = (z - kappa)/nu - log(nu n) - 1
        arg = (za - kappa[:, None]) / nu[:, None] - np.log(nu[:, None] * n) - 1.0
        return nu[:, None] * np.real(wrightomega(arg))

    def solve_kappa(nu):
        kappa = za.mean(axis=1) - 1.0 / n
        for _ in range(100):
            q = ratios(nu, kappa)
            g = q.sum(axis=1) - 1.0
            dg = -np.sum(q / (q + nu[:, None]), axis=1)
            step = g / dg
            kappa = kappa - step
            if np.all(np.abs(step) < 1e-15 * (1 + np.abs(kappa))):
                break
        return ratios(nu, kappa)

    # bisection in log nu: divergence decreases as nu grows
    lo = np.full(za.shape[0], -30.0)
    hi = np.full(za.shape[0], 10.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        q = solve_kappa(np.exp(mid))
        too_far = _kl_rows(q) > eta
        lo = np.where(too_far, mid, lo)
        hi = np.where(too_far, hi, mid)
    q = solve_kappa(np.exp(hi))
    out[active] = q / q.sum(axis=1, keepdims=True)
    return out


def projected_gradient_ascent(neg_scores, eta, step=1.0, iters=2000, tol=1e-13):
    """Maximize ``E_q[f]`` over the KL ball by Euclidean projected ascent.

    Rows of ``neg_scores`` are independent instances. This oracle never
    uses the exponential-tilt form of the solution.
    """
    f = np.atleast_2d(np.asarray(neg_scores, dtype=np.float64))
    q = np.full(f.shape, 1.0 / f.shape[1])
    prev = np.sum(q * f, axis=1)
    for _ in range(iters):
        q = project_kl_ball(q + step * f, eta)
        obj = np.sum(q * f, axis=1)
        if np.all(np.abs(obj - prev) < tol):
            break
        prev = obj
    return q, np.sum(q * f, axis=1)


def random_feasible_weights(rng, n, eta, count):
    """Dirichlet draws shrunk toward uniform until inside the KL ball."""
    d = rng.dirichlet(np.full(n, 0.5), size=count)
    u = np.full(n, 1.0 / n)
    lo = np.zeros(count)
    hi = np.ones(count)
    inside = _kl_rows(d) <= eta
    hi_ok = inside.copy()
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        q = (1 - mid[:, None]) * u + mid[:, None] * d
        ok = _kl_rows(q) <= eta
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    t = np.where(hi_ok, 1.0, lo)
    return (1 - t[:, None]) * u + t[:, None] * d
