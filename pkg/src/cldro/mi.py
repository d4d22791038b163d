"""Mutual-information estimation on correlated Gaussians.

Pairs ``(x, y)`` have ``y = rho x + sqrt(1 - rho^2) eps`` coordinatewise, so
the true MI is ``-(d/2) log(1 - rho^2)`` nats. A critic is trained by
gradient ascent on one of four variational objectives, using in-batch
negatives: for a batch of K pairs the score matrix ``F[i, j] = f(x_i, y_j)``
has the positives on its diagonal and the negatives off it.

Estimators
----------
``infonce``  per-anchor ``F_ii - log mean_{j != i} exp(F_ij)`` (the negative of
             the mean-denominator InfoNCE loss); with ``convention="sum"`` the
             positive joins the denominator and the estimate is
             ``log K - loss``, capped at ``log K``.
``tight_kl`` ``mean F_ii - log mean_{i != j} exp(F_ij)`` over all negative pairs.
``dv``       ``mean F_ii - mean_{i != j} (exp(F_ij) - 1)``, the lambda-free bound.
``chi2``     ``mean F_ii - mean F_ij - var F_ij``; its maximum is a quarter of
             the Pearson chi-squared information, which is what it is
             compared against.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from ._training import Momentum, check_finite
from .phidiv import SampleSet, dv_divergence, register_divergence, tight_variational_divergence

ESTIMATORS = ("infonce", "tight_kl", "dv", "chi2")
KL = register_divergence("KL")


@dataclass(frozen=True)
class GaussianPairConfig:
    dimension: int = 1
    correlation: float = 0.8

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if not abs(self.correlation) < 1:
            raise ValueError("correlation must lie in (-1, 1)")


def true_mi(config: GaussianPairConfig):
    return -0.5 * config.dimension * math.log1p(-config.correlation**2)


def true_chi2_information(config: GaussianPairConfig):
    """Pearson chi-squared divergence between the joint and the product of marginals."""
    return (1.0 - config.correlation**2) ** (-config.dimension) - 1.0


def estimator_target(config, estimator):
    """The quantity each estimator lower-bounds at the optimal critic."""
    if estimator == "chi2":
        return 0.25 * true_chi2_information(config)
    return true_mi(config)


def sample_pairs(config: GaussianPairConfig, n, seed=None, rng=None):
    """``n`` correlated pairs as two ``(n, d)`` arrays; bit-identical per seed."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    rho = config.correlation
    x = rng.standard_normal((n, config.dimension))
    eps = rng.standard_normal((n, config.dimension))
    return x, rho * x + math.sqrt(1.0 - rho**2) * eps


@dataclass
class BilinearCritic:
    """``f(x, y) = scale * (x^T W y + x^T A x + y^T B y + bias)``.

    With ``quadratic=False`` only ``W`` is trained, giving the pure bilinear
    critic; the quadratic and bias terms are what let the critic express the
    full Gaussian log density ratio.
    """

    W: np.ndarray
    scale: float = 1.0
    A: np.ndarray = None
    B: np.ndarray = None
    bias: float = 0.0
    quadratic: bool = True

    def __post_init__(self):
        d = self.W.shape[0]
        if self.A is None:
            self.A = np.zeros((d, d))
        if self.B is None:
            self.B = np.zeros((d, d))
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def zeros(cls, d, scale=1.0, quadratic=True):
        return cls(np.zeros((d, d)), scale=scale, quadratic=quadratic)

    @classmethod
    def optimal(cls, config: GaussianPairConfig):
        """The critic equal to the true log density ratio (scale 1)."""
        rho, d = config.correlation, config.dimension
        eye = np.eye(d)
        c = 1.0 - rho**2
        return cls(
            rho / c * eye,
            A=-(rho**2) / (2 * c) * eye,
            B=-(rho**2) / (2 * c) * eye,
            bias=-0.5 * d * math.log(c),
        )

    def params(self):
        return {"W": self.W, "A": self.A, "B": self.B, "bias": np.float64(self.bias)}

    def set_params(self, p):
        self.W, self.A, self.B, self.bias = p["W"], p["A"], p["B"], float(p["bias"])

    def __call__(self, x, y):
        x = np.atleast_1d(x)
        y = np.atleast_1d(y)
        return float(self.scale * (x @ self.W @ y + x @ self.A @ x + y @ self.B @ y + self.bias))

    def score_matrix(self, X, Y):
        qx = np.einsum("id,de,ie->i", X, self.A, X)
        qy = np.einsum("jd,de,je->j", Y, self.B, Y)
        return self.scale * (X @ self.W @ Y.T + qx[:, None] + qy[None, :] + self.bias)

    def grad(self, X, Y, C):
        """Parameter gradient of ``sum_ij C_ij F_ij``."""
        g = {"W": self.scale * X.T @ C @ Y}
        if self.quadratic:
            g["A"] = self.scale * (X * C.sum(axis=1)[:, None]).T @ X
            g["B"] = self.scale * (Y * C.sum(axis=0)[:, None]).T @ Y
            g["bias"] = np.float64(self.scale * C.sum())
        else:
            g["A"] = np.zeros_like(self.A)
            g["B"] = np.zeros_like(self.B)
            g["bias"] = np.float64(0.0)
        return g


def _offdiag(F):
    K = F.shape[0]
    return F[~np.eye(K, dtype=bool)]


def objective_and_coeffs(F, estimator, convention="mean"):
    """Estimator value on score matrix ``F`` and its gradient ``dJ/dF``."""
    K = F.shape[0]
    eye = np.eye(K, dtype=bool)
    diag = np.diag(F)
    C = np.zeros_like(F)
    if estimator == "infonce":
        if convention == "sum":
            lse = logsumexp(F, axis=1)
            value = float(np.mean(diag - lse)) + math.log(K)
            C = -softmax(F, axis=1) / K
            C[eye] += 1.0 / K
        else:
            masked = np.where(eye, -np.inf, F)
            lse = logsumexp(masked, axis=1)
            value = float(np.mean(diag - lse)) + math.log(K - 1)
            C = -softmax(masked, axis=1) / K
            C[eye] = 1.0 / K
        return value, C
    off = _offdiag(F)
    M = off.size
    if estimator == "tight_kl":
        value = float(np.mean(diag) - (logsumexp(off) - math.log(M)))
        C[~eye] = -softmax(off)
    elif estimator == "dv":
        e = np.exp(off)
        value = float(np.mean(diag) - np.mean(e - 1.0))
        C[~eye] = -e / M
    elif estimator == "chi2":
        m = off.mean()
        value = float(np.mean(diag) - m - np.mean((off - m) ** 2))
        C[~eye] = -1.0 / M - 2.0 * (off - m) / M
    else:
        raise ValueError(f"unknown estimator {estimator!r}; known: {', '.join(ESTIMATORS)}")
    C[eye] = 1.0 / K
    return value, C


@dataclass(frozen=True)
class MiEstimate:
    estimator: str
    trajectory: np.ndarray = field(repr=False)
    final: float
    target: float
    convention: str = "mean"
    critic: BilinearCritic = field(default=None, repr=False, compare=False)


def estimate_mi(
    config: GaussianPairConfig,
    estimator="infonce",
    batch=128,
    steps=2000,
    step_size=0.01,
    seed=0,
    momentum=0.9,
    convention="mean",
    quadratic=True,
):
    """Train a critic by gradient ascent and track the estimate.

    Each step draws a fresh batch and records the estimator's value on it
    *before* updating, so the trajectory is never evaluated on data the
    critic was just fitted to. ``final`` averages the last 10% of steps.
    """
    if batch < 2:
        raise ValueError("batch must be at least 2 (negatives are the other pairs)")
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; known: {', '.join(ESTIMATORS)}")
    if convention not in ("mean", "sum"):
        raise ValueError("convention must be 'mean' or 'sum'")
    rng = np.random.default_rng(seed)
    critic = BilinearCritic.zeros(config.dimension, quadratic=quadratic)
    opt = Momentum(step_size, momentum, sign=+1.0)
    traj = np.empty(steps)
    for t in range(steps):
        X, Y = sample_pairs(config, batch, rng=rng)
        # overflow shows up as a non-finite estimate, reported with its step
        with np.errstate(over="ignore", invalid="ignore"):
            F = critic.score_matrix(X, Y)
            value, C = objective_and_coeffs(F, estimator, convention)
        check_finite(value, t, "MI estimate")
        traj[t] = value
        critic.set_params(opt.step(critic.params(), critic.grad(X, Y, C)))
    tail = max(1, steps // 10)
    return MiEstimate(
        estimator,
        traj,
        float(np.mean(traj[-tail:])),
        estimator_target(config, estimator),
        convention,
        critic,
    )


def snapshot_bounds(critic, config, batch=512, seed=0):
    """Tight-KL and DV values of one critic on a shared evaluation batch."""
    X, Y = sample_pairs(config, batch, seed=seed)
    F = critic.score_matrix(X, Y)
    samples = SampleSet(np.diag(F), _offdiag(F))
    return tight_variational_divergence(KL, samples), dv_divergence(KL, samples)


def compare_estimators(
    config: GaussianPairConfig,
    estimators=ESTIMATORS,
    batch=128,
    steps=2000,
    step_size=0.01,
    seed=0,
    eval_seed=None,
    **kwargs,
):
    """Run each estimator with the same seed; one row per estimator.

    Every trained critic is also scored by both the tight and the DV
    KL bound on one shared evaluation batch. The InfoNCE objective cannot
    see terms of the critic that depend on ``x`` alone, so its critic can
    score poorly under either KL bound while its own estimate is accurate.
    """
    eval_seed = seed + 1 if eval_seed is None else eval_seed
    rows = []
    for name in estimators:
        est = estimate_mi(config, name, batch, steps, step_size, seed, **kwargs)
        tight, dv = snapshot_bounds(est.critic, config, seed=eval_seed)
        rows.append(
            {
                "estimator": name,
                "final": est.final,
                "target": est.target,
                "true_mi": true_mi(config),
                "snapshot_tight_kl": tight,
                "snapshot_dv": dv,
                "estimate": est,
            }
        )
    return rows
