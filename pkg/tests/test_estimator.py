import unittest

import numpy as np

from alevar.core.dgp import DgpTruth, gen_aipw_iid, gen_clustered
from alevar.core.errors import InvalidSizeError, PositivityError
from alevar.core.estimator import (
    EstimatorPipeline,
    aipw,
    loo_perturbations,
    remainder_oracle,
    true_eif,
    true_eif_scores,
)
from alevar.core.nuisance import NuisancePair
from alevar.inference.resampling import jackknife


class AipwTests(unittest.TestCase):
    def setUp(self):
        self.truth = DgpTruth()
        self.data = gen_aipw_iid(400, self.truth, 50)

    def test_scores_are_centred(self):
        result = aipw(self.data, NuisancePair.fitted(self.data))
        self.assertLessEqual(abs(float(np.mean(result.scores))), 1e-10)
        self.assertEqual(result.n, 400)
        self.assertIsNone(result.cluster_scores)

    def test_oracle_nuisances_leave_no_remainder(self):
        pipeline = EstimatorPipeline(mode="oracle", truth=self.truth)
        oracle = remainder_oracle(pipeline.estimate(self.data), self.data, self.truth)
        self.assertLessEqual(abs(oracle.r_rem), 1e-12)

    def test_single_row_eif_matches_vector_form(self):
        scores = true_eif_scores(self.data, self.truth)
        for i, obs in enumerate(list(self.data.rows())[:25]):
            self.assertAlmostEqual(true_eif(obs, self.truth), float(scores[i]), places=12)

    def test_positivity_violation_lists_rows(self):
        with self.assertRaises(PositivityError) as ctx:
            aipw(self.data, NuisancePair.oracle(self.truth), g_min=0.45)
        self.assertTrue(ctx.exception.rows)

    def test_clustered_scores_are_summed_per_cluster(self):
        truth = DgpTruth.from_icc(0.1, 5)
        data = gen_clustered(30, truth, 51)
        result = aipw(data, NuisancePair.oracle(truth))
        self.assertEqual(result.cluster_scores.size, 30)
        self.assertAlmostEqual(float(result.cluster_scores.sum()), float(result.scores.sum()), places=10)

    def test_misspecified_outcome_model_stays_consistent(self):
        data = gen_aipw_iid(20_000, self.truth, 52)
        pipeline = EstimatorPipeline(mode="fitted", truth=self.truth, interaction=False)
        self.assertLess(abs(pipeline(data) - self.truth.psi0), 0.03)


class PipelineTests(unittest.TestCase):
    def test_fast_leave_one_out_matches_naive_refits(self):
        truth = DgpTruth()
        data = gen_aipw_iid(80, truth, 60)
        pipeline = EstimatorPipeline(mode="fitted", truth=truth)
        fast = pipeline.loo_estimates(data)
        naive = np.array([pipeline(data.drop_index(i)) for i in range(len(data))])
        np.testing.assert_allclose(fast, naive, rtol=0, atol=1e-8)

    def test_jackknife_scales_with_outcome_units(self):
        truth = DgpTruth()
        data = gen_aipw_iid(60, truth, 61)
        pipeline = EstimatorPipeline(mode="fitted", truth=truth)
        base, _ = jackknife(pipeline, data)
        scaled, _ = jackknife(pipeline, data.with_outcomes(3.0 * data.y))
        self.assertAlmostEqual(scaled / base, 9.0, delta=9e-9)
        self.assertAlmostEqual(pipeline(data.with_outcomes(3.0 * data.y)), 3.0 * pipeline(data), places=10)

    def test_non_fitted_modes_need_the_truth(self):
        with self.assertRaises(ValueError):
            EstimatorPipeline(mode="oracle")


class LooPerturbationTests(unittest.TestCase):
    def test_oracle_perturbations_have_closed_form(self):
        truth = DgpTruth()
        data = gen_aipw_iid(50, truth, 70)
        result = loo_perturbations(data, truth, EstimatorPipeline(mode="oracle", truth=truth))
        d = true_eif_scores(data, truth)
        n = d.size
        expected = (d.sum() - d) / (n * (n - 1))
        np.testing.assert_allclose(result.deltas, expected, rtol=0, atol=1e-12)
        self.assertLessEqual(float(np.max(np.abs(result.b_values))), 1e-12)
        self.assertAlmostEqual(result.c_n / ((n - 1) * float(np.sum(expected**2))), 1.0, delta=1e-8)
        self.assertEqual(result.failures, {})

    def test_fitted_perturbations_are_finite(self):
        truth = DgpTruth()
        data = gen_aipw_iid(100, truth, 71)
        result = loo_perturbations(data, truth, EstimatorPipeline(mode="fitted", truth=truth))
        self.assertEqual(result.n, 100)
        self.assertTrue(np.all(np.isfinite(result.deltas)))
        self.assertGreater(result.c_n, 0.0)

    def test_size_caps(self):
        truth = DgpTruth()
        pipeline = EstimatorPipeline(mode="oracle", truth=truth)
        with self.assertRaises(InvalidSizeError):
            loo_perturbations(gen_aipw_iid(30, truth, 72), truth, pipeline, max_units=20)


if __name__ == "__main__":
    unittest.main()
