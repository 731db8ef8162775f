import unittest

import numpy as np
from sklearn.linear_model import LinearRegression, LogisticRegression

from alevar.core.dgp import DgpTruth, NearBoundaryConfig, gen_aipw_iid
from alevar.core.errors import (
    DegenerateResponseError,
    InvalidSizeError,
    NonConvergenceError,
    SingularDesignError,
)
from alevar.core.models import Dataset
from alevar.core.nuisance import (
    NuisancePair,
    design_outcome,
    design_propensity,
    fit_logistic,
    fit_ols,
    log_likelihood,
    loo_downdate_ols,
    loo_ols_all,
    loo_refit_logistic,
    score,
    update_ols,
)


class OutcomeRegressionTests(unittest.TestCase):
    def test_matches_sklearn_least_squares(self):
        data = gen_aipw_iid(300, DgpTruth(), 10)
        fit = fit_ols(data)
        reference = LinearRegression(fit_intercept=False).fit(design_outcome(data.a, data.w), data.y)
        np.testing.assert_allclose(fit.coefficients, reference.coef_, rtol=0, atol=1e-8)

    def test_downdate_matches_refit(self):
        for seed in range(20):
            data = gen_aipw_iid(60, DgpTruth(), seed)
            fit = fit_ols(data)
            for i in range(len(data)):
                fast = loo_downdate_ols(fit, data, i)
                slow = fit_ols(data.drop_index(i))
                self.assertLessEqual(float(np.max(np.abs(fast.coefficients - slow.coefficients))), 1e-8)
                self.assertEqual(fast.n_used, 59)

    def test_vectorised_downdates_match_single_downdates(self):
        data = gen_aipw_iid(80, DgpTruth(), 21)
        fit = fit_ols(data)
        every = loo_ols_all(fit, data)
        for i in (0, 17, 79):
            np.testing.assert_allclose(every[i], loo_downdate_ols(fit, data, i).coefficients, rtol=0, atol=1e-10)

    def test_update_undoes_downdate(self):
        data = gen_aipw_iid(40, DgpTruth(), 22)
        fit = fit_ols(data)
        row = list(data.rows())[5]
        restored = update_ols(loo_downdate_ols(fit, data, 5), row)
        np.testing.assert_allclose(restored.coefficients, fit.coefficients, rtol=0, atol=1e-10)
        self.assertEqual(restored.n_used, 40)

    def test_downdate_needs_six_rows(self):
        data = Dataset(w=[-1.0, -0.5, 0.0, 0.5, 1.0], a=[0, 1, 0, 1, 1], y=[1.0, 2.0, 1.5, 3.0, 2.5])
        fit = fit_ols(data)
        with self.assertRaises(InvalidSizeError):
            loo_downdate_ols(fit, data, 0)

    def test_downdate_index_range(self):
        data = gen_aipw_iid(20, DgpTruth(), 23)
        with self.assertRaises(IndexError):
            loo_downdate_ols(fit_ols(data), data, 20)

    def test_constant_covariate_is_singular(self):
        data = Dataset(w=np.ones(10), a=[0, 1] * 5, y=np.arange(10.0))
        with self.assertRaises(SingularDesignError):
            fit_ols(data)


class PropensityTests(unittest.TestCase):
    def test_matches_sklearn_unpenalised_fit(self):
        data = gen_aipw_iid(500, DgpTruth(), 30)
        fit = fit_logistic(data)
        reference = LogisticRegression(
            penalty=None, fit_intercept=False, solver="newton-cholesky", tol=1e-12, max_iter=1000
        ).fit(design_propensity(data.w), data.a)
        self.assertTrue(fit.converged)
        np.testing.assert_allclose(fit.coefficients, reference.coef_.ravel(), rtol=0, atol=1e-6)

    def test_score_is_likelihood_gradient(self):
        data = gen_aipw_iid(200, DgpTruth(), 31)
        x = design_propensity(data.w)
        a = data.a.astype(float)
        beta = np.array([0.1, 0.2, -0.05])
        step = 1e-6
        numeric = np.array(
            [
                (log_likelihood(beta + step * e, x, a) - log_likelihood(beta - step * e, x, a)) / (2 * step)
                for e in np.eye(3)
            ]
        )
        np.testing.assert_allclose(score(beta, x, a), numeric, rtol=1e-5, atol=1e-4)

    def test_score_vanishes_at_the_fit(self):
        data = gen_aipw_iid(300, DgpTruth(), 32)
        fit = fit_logistic(data)
        gradient = score(fit.coefficients, design_propensity(data.w), data.a.astype(float))
        self.assertLessEqual(float(np.max(np.abs(gradient))), 1e-10)

    def test_warm_started_refit_matches_cold_fit(self):
        data = gen_aipw_iid(120, DgpTruth(), 33)
        warm = fit_logistic(data)
        for i in (0, 60, 119):
            fast = loo_refit_logistic(data, i, warm)
            cold = fit_logistic(data.drop_index(i))
            np.testing.assert_allclose(fast.coefficients, cold.coefficients, rtol=0, atol=1e-8)

    def test_separation_raises_non_convergence(self):
        w = np.linspace(-2.0, 2.0, 40)
        data = Dataset(w=w, a=(w > 0).astype(int), y=np.zeros(40))
        with self.assertRaises(NonConvergenceError):
            fit_logistic(data)

    def test_separated_toy_set_raises_non_convergence(self):
        data = Dataset(w=[-1.0, 1.0] * 3, a=[0, 1] * 3, y=np.zeros(6))
        with self.assertRaises(NonConvergenceError):
            fit_logistic(data)

    def test_single_class_is_degenerate(self):
        data = Dataset(w=np.linspace(-1, 1, 20), a=np.ones(20, dtype=int), y=np.zeros(20))
        with self.assertRaises(DegenerateResponseError):
            fit_logistic(data)


class NuisancePairTests(unittest.TestCase):
    def test_zero_scale_near_boundary_equals_oracle(self):
        truth = DgpTruth()
        data = gen_aipw_iid(300, truth, 40)
        oracle = NuisancePair.oracle(truth)
        near = NuisancePair.near_boundary(data, truth, NearBoundaryConfig(lambda_q=0.0, lambda_g=0.0))
        np.testing.assert_array_equal(near.g(data.w), oracle.g(data.w))
        np.testing.assert_array_equal(near.q(1, data.w), oracle.q(1, data.w))
        np.testing.assert_array_equal(near.q(0, data.w), oracle.q(0, data.w))

    def test_mode_requirements(self):
        with self.assertRaises(ValueError):
            NuisancePair(mode="oracle")
        with self.assertRaises(ValueError):
            NuisancePair(mode="guess")


if __name__ == "__main__":
    unittest.main()
