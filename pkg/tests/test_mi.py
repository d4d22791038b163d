import math

import numpy as np
import pytest
from scipy import integrate, stats

from cldro._training import TrainingDiverged
from cldro.mi import (
    ESTIMATORS,
    BilinearCritic,
    GaussianPairConfig,
    compare_estimators,
    estimate_mi,
    estimator_target,
    objective_and_coeffs,
    sample_pairs,
    snapshot_bounds,
    true_chi2_information,
    true_mi,
)
from helpers import central_difference, relative_error

MI_D1_RHO08 = 0.510825623765991
MI_D2_RHO05 = 0.287682072451781


class TestGroundTruth:
    def test_independent(self):
        for d in (1, 3, 10):
            assert true_mi(GaussianPairConfig(d, 0.0)) == 0.0

    def test_closed_forms(self):
        assert true_mi(GaussianPairConfig(1, 0.8)) == pytest.approx(MI_D1_RHO08, abs=1e-15)
        assert true_mi(GaussianPairConfig(2, 0.5)) == pytest.approx(MI_D2_RHO05, abs=1e-15)

    def test_chi2_information_by_quadrature(self):
        rho = 0.6
        joint = stats.multivariate_normal([0, 0], [[1, rho], [rho, 1]])

        def integrand(y, x):
            return joint.pdf([x, y]) ** 2 / (stats.norm.pdf(x) * stats.norm.pdf(y))

        val, _ = integrate.dblquad(integrand, -10, 10, -10, 10, epsabs=1e-11)
        assert val - 1 == pytest.approx(true_chi2_information(GaussianPairConfig(1, rho)), rel=1e-7)

    def test_targets(self):
        c = GaussianPairConfig(1, 0.8)
        assert estimator_target(c, "chi2") == pytest.approx(true_chi2_information(c) / 4)
        assert estimator_target(c, "dv") == true_mi(c)

    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianPairConfig(1, 1.0)
        with pytest.raises(ValueError):
            GaussianPairConfig(0, 0.5)


class TestSampling:
    def test_correlation(self):
        x, y = sample_pairs(GaussianPairConfig(3, 0.8), 100_000, seed=1)
        for k in range(3):
            assert abs(np.corrcoef(x[:, k], y[:, k])[0, 1] - 0.8) < 0.01

    def test_independent(self):
        x, y = sample_pairs(GaussianPairConfig(1, 0.0), 100_000, seed=2)
        assert abs(np.corrcoef(x[:, 0], y[:, 0])[0, 1]) < 0.01

    def test_deterministic(self):
        a = sample_pairs(GaussianPairConfig(2, 0.3), 50, seed=7)
        b = sample_pairs(GaussianPairConfig(2, 0.3), 50, seed=7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_positive_n(self):
        with pytest.raises(ValueError):
            sample_pairs(GaussianPairConfig(), 0, seed=0)


class TestCritic:
    def test_optimal_is_log_density_ratio(self, rng):
        c = GaussianPairConfig(2, 0.7)
        critic = BilinearCritic.optimal(c)
        x, y = sample_pairs(c, 5, rng=rng)
        cov = np.block([[np.eye(2), 0.7 * np.eye(2)], [0.7 * np.eye(2), np.eye(2)]])
        joint = stats.multivariate_normal(np.zeros(4), cov)
        for xi, yi in zip(x, y):
            ref = joint.logpdf(np.r_[xi, yi]) - stats.norm.logpdf(xi).sum() - stats.norm.logpdf(yi).sum()
            assert critic(xi, yi) == pytest.approx(ref, abs=1e-12)

    def test_score_matrix_matches_pairwise(self, rng):
        critic = BilinearCritic(rng.normal(size=(3, 3)), 0.5, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), 0.2)
        X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        F = critic.score_matrix(X, Y)
        assert F.shape == (4, 5)
        assert F[2, 3] == pytest.approx(critic(X[2], Y[3]), abs=1e-12)

    def test_parameter_gradient(self, rng):
        critic = BilinearCritic(rng.normal(size=(2, 2)), 0.7, rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), 0.1)
        X, Y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        C = rng.normal(size=(6, 6))
        g = critic.grad(X, Y, C)
        for name in ("W", "A", "B"):
            p = critic.params()

            def fn(v, name=name):
                c = BilinearCritic(**{"W": p["W"], "A": p["A"], "B": p["B"], "bias": float(p["bias"]),
                                      "scale": 0.7, name: v})
                return float(np.sum(C * c.score_matrix(X, Y)))

            assert relative_error(g[name], central_difference(fn, p[name])) < 1e-6

    def test_bilinear_only_freezes_quadratic(self, rng):
        critic = BilinearCritic.zeros(2, quadratic=False)
        g = critic.grad(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), np.ones((4, 4)))
        assert not np.any(g["A"]) and not np.any(g["B"]) and g["bias"] == 0.0

    def test_positive_scale(self):
        with pytest.raises(ValueError):
            BilinearCritic.zeros(2, scale=0.0)


class TestObjectives:
    @pytest.mark.parametrize("estimator,convention", [("infonce", "mean"), ("infonce", "sum"),
                                                      ("tight_kl", "mean"), ("dv", "mean"), ("chi2", "mean")])
    def test_coefficients_are_gradient(self, estimator, convention, rng):
        for _ in range(20):
            F = rng.normal(size=(5, 5))
            _, C = objective_and_coeffs(F, estimator, convention)
            fd = central_difference(lambda G: objective_and_coeffs(G, estimator, convention)[0], F)
            assert relative_error(C, fd) < 1e-4

    def test_sum_convention_capped_by_log_batch(self, rng):
        for _ in range(50):
            F = rng.normal(scale=20, size=(8, 8))
            assert objective_and_coeffs(F, "infonce", "sum")[0] <= math.log(8) + 1e-12

    def test_mean_convention_is_negative_loss(self):
        F = np.array([[0.8, 0.9, 0.1, -0.5], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
        F[1, 1] = F[2, 2] = F[3, 3] = 0.0
        v, _ = objective_and_coeffs(F / 0.5, "infonce")
        # first row reproduces the worked InfoNCE example, the others contribute 0
        assert v == pytest.approx(0.6653547916726 / 4, abs=1e-12)

    def test_unknown_estimator(self):
        with pytest.raises(ValueError, match="unknown estimator"):
            objective_and_coeffs(np.zeros((3, 3)), "nwj")


class TestTraining:
    def test_deterministic(self):
        a = estimate_mi(GaussianPairConfig(), "infonce", batch=32, steps=100, seed=3)
        b = estimate_mi(GaussianPairConfig(), "infonce", batch=32, steps=100, seed=3)
        np.testing.assert_array_equal(a.trajectory, b.trajectory)

    def test_final_is_tail_mean(self):
        e = estimate_mi(GaussianPairConfig(), "dv", batch=16, steps=50, seed=0)
        assert e.final == pytest.approx(np.mean(e.trajectory[-5:]))
        assert len(e.trajectory) == 50

    @pytest.mark.parametrize("estimator", ESTIMATORS)
    def test_independent_variables(self, estimator):
        e = estimate_mi(GaussianPairConfig(1, 0.0), estimator, batch=128, steps=1000, seed=0)
        assert abs(e.final) < 0.05

    def test_divergence_reports_step(self):
        with pytest.raises(TrainingDiverged) as info:
            estimate_mi(GaussianPairConfig(), "dv", batch=16, steps=300, step_size=1e3)
        assert info.value.step >= 0

    def test_preconditions(self):
        with pytest.raises(ValueError, match="batch"):
            estimate_mi(GaussianPairConfig(), batch=1)
        with pytest.raises(ValueError, match="unknown estimator"):
            estimate_mi(GaussianPairConfig(), "mine")
        with pytest.raises(ValueError, match="convention"):
            estimate_mi(GaussianPairConfig(), convention="max")

    def test_mean_convention_not_capped(self):
        # excluding the positive from the denominator removes the log-batch ceiling
        e = estimate_mi(GaussianPairConfig(1, 0.999), "infonce", batch=8, steps=2000, seed=0)
        s = estimate_mi(GaussianPairConfig(1, 0.999), "infonce", batch=8, steps=2000, seed=0, convention="sum")
        assert s.final <= math.log(8) + 0.05
        assert e.final > math.log(8)

    @pytest.mark.slow
    def test_monotone_in_correlation(self):
        wins = 0
        for seed in range(5):
            finals = [estimate_mi(GaussianPairConfig(1, r), "infonce", steps=1000, seed=seed).final
                      for r in (0.3, 0.6, 0.9)]
            wins += finals[0] < finals[1] < finals[2]
        assert wins >= 3

    @pytest.mark.slow
    def test_compare_estimators(self):
        c = GaussianPairConfig(1, 0.8)
        rows = compare_estimators(c, steps=2000, seed=0)
        assert [r["estimator"] for r in rows] == list(ESTIMATORS)
        for r in rows:
            assert r["snapshot_tight_kl"] >= r["snapshot_dv"] - 1e-12
            assert r["final"] <= r["target"] + 0.05
        assert rows[0]["final"] <= true_mi(c) + 0.05

    def test_snapshot_optimal_critic(self):
        c = GaussianPairConfig(1, 0.8)
        tight, dv = snapshot_bounds(BilinearCritic.optimal(c), c, batch=2000, seed=0)
        assert tight >= dv
        assert abs(tight - true_mi(c)) < 0.1
