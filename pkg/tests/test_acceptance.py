"""
Long-running Monte Carlo checks of coverage, variance ratios and the
calibrated remainder variance. They run only with ALEVAR_RUN_SLOW=1 and
honour ALEVAR_WORKERS for the replicate pool.
"""

import math
import os
import time
import unittest

import numpy as np

from alevar.core.dgp import DgpTruth, NearBoundaryConfig, gen_aipw_iid, perturbation_amplitudes
from alevar.core.estimator import EstimatorPipeline, loo_perturbations, remainder_oracle
from alevar.core.nuisance import fit_logistic, fit_ols, loo_ols_all
from alevar.inference.diagnostics import cn_tracker, decomposition_oracle
from alevar.study.calibration import c_r_at, calibrate, sigma2_eif
from alevar.study.config import build_config
from alevar.study.runner import run_cells
from alevar.utils.streams import replicate_generator

SLOW = os.getenv("ALEVAR_RUN_SLOW") == "1"
WORKERS = int(os.getenv("ALEVAR_WORKERS", "1") or 1)


def _study(**overrides):
    settings = {"boot_b": 0, "methods": "sand-wald,jk-wald,hc-wald", "worker_count": WORKERS}
    settings.update(overrides)
    return run_cells(build_config(settings))


def _usable(records):
    return [r for r in records if not r.failed]


def _estimates(pipeline, size, reps, seed, truth=None):
    truth = truth or DgpTruth()
    values = []
    for r in range(reps):
        data = gen_aipw_iid(size, truth, replicate_generator(seed, 0, r))
        values.append(pipeline(data))
    return np.asarray(values)


@unittest.skipUnless(SLOW, "set ALEVAR_RUN_SLOW=1 for Monte Carlo acceptance checks")
class LargeSampleTests(unittest.TestCase):
    def test_regression_recovers_coefficients(self):
        data = gen_aipw_iid(100_000, DgpTruth(), 1)
        np.testing.assert_allclose(fit_ols(data).coefficients, [0.5, 0.4, 0.3, 0.15], rtol=0, atol=0.02)
        coefficients = fit_logistic(data).coefficients
        self.assertAlmostEqual(coefficients[1], 0.3, delta=0.03)
        self.assertAlmostEqual(coefficients[2], 0.0, delta=0.03)

    def test_oracle_estimate_near_truth(self):
        truth = DgpTruth()
        data = gen_aipw_iid(100_000, truth, 2)
        self.assertAlmostEqual(EstimatorPipeline(mode="oracle", truth=truth)(data), 0.4, delta=0.01)

    def test_perturbation_amplitudes_are_standardised(self):
        truth = DgpTruth()
        draws = np.array([perturbation_amplitudes(gen_aipw_iid(100_000, truth, replicate_generator(3, 0, r)), truth) for r in range(1000)])
        self.assertAlmostEqual(float(np.var(draws[:, 0], ddof=1)), 1.0, delta=0.1)
        self.assertAlmostEqual(float(np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]), 0.0, delta=0.1)

    def test_fast_leave_one_out_is_much_faster(self):
        data = gen_aipw_iid(2000, DgpTruth(), 4)
        fit = fit_ols(data)
        started = time.perf_counter()
        loo_ols_all(fit, data)
        fast = time.perf_counter() - started
        started = time.perf_counter()
        for i in range(len(data)):
            fit_ols(data.drop_index(i))
        slow = time.perf_counter() - started
        self.assertGreaterEqual(slow / max(fast, 1e-9), 5.0)


@unittest.skipUnless(SLOW, "set ALEVAR_RUN_SLOW=1 for Monte Carlo acceptance checks")
class StrongDecayTests(unittest.TestCase):
    def test_bias_and_spread_at_two_thousand(self):
        truth = DgpTruth()
        psi = _estimates(EstimatorPipeline(mode="fitted", truth=truth), 2000, 500, 10)
        self.assertAlmostEqual(float(psi.mean()) - 0.4, 0.0, delta=0.003)
        self.assertAlmostEqual(float(psi.std(ddof=1)) / 0.023, 1.0, delta=0.2)

    def test_misspecified_outcome_model_is_unbiased(self):
        truth = DgpTruth()
        psi = _estimates(EstimatorPipeline(mode="fitted", truth=truth, interaction=False), 2000, 500, 11)
        self.assertAlmostEqual(float(psi.mean()) - 0.4, 0.0, delta=0.005)

    def test_rho_column_across_sizes(self):
        config = build_config(
            {
                "sizes": "200,500,1000,2000",
                "reps": 500,
                "boot_b": 0,
                "methods": "sand-wald,jk-wald,hc-wald",
                "worker_count": WORKERS,
            }
        )
        report, cells = run_cells(config)
        for (size, rho), expected in zip(report.rho_by_size(), (1.040, 1.014, 1.007, 1.003)):
            with self.subTest(size=size):
                self.assertAlmostEqual(rho, expected, delta=0.03)
        rhos = [rho for _, rho in report.rho_by_size()]
        self.assertEqual(rhos, sorted(rhos, reverse=True))
        for row in report.rows:
            self.assertEqual(row.cp_hc, row.cp_jk)
            self.assertGreaterEqual(row.cp_jk, 0.92)
            self.assertLessEqual(row.cp_jk, 0.98)
        for record in cells[(500, 0.0)]:
            if not record.failed:
                self.assertEqual(record.variance_report.var_hc, record.variance_report.var_jk)
        for row in report.rows:
            records = _usable(cells[(row.size, 0.0)])
            mean_se = float(np.mean([math.sqrt(r.variance_report.var_jk) for r in records]))
            with self.subTest(size=row.size):
                self.assertGreaterEqual(row.cp_sand, 0.92)
                self.assertLessEqual(row.cp_sand, 0.98)
                self.assertLessEqual(abs(row.bias), 4.0 * row.mcsd / math.sqrt(len(records)))
                self.assertAlmostEqual(row.mcsd / mean_se, 1.0, delta=0.10)
        decomposition = decomposition_oracle(cells[(1000, 0.0)])
        self.assertLessEqual(abs(decomposition.closure_gap), 3.0 * decomposition.mc_se_total)

    def test_jackknife_and_bootstrap_variances_agree(self):
        _, cells = _study(sizes="500,1000", reps=200, boot_b=200, methods="jk-wald,boot-wald")
        for key, records in sorted(cells.items()):
            records = _usable(records)
            mean_jk = float(np.mean([r.variance_report.var_jk for r in records]))
            mean_boot = float(np.mean([r.variance_report.var_boot for r in records]))
            with self.subTest(size=key[0]):
                self.assertAlmostEqual(mean_jk / mean_boot, 1.0, delta=0.10)

    def test_bca_coverage_at_one_thousand(self):
        report, _ = _study(sizes="1000", reps=500, boot_b=200, methods="boot-percentile,bca")
        row = report.row(1000)
        self.assertAlmostEqual(row.cp_bca, 0.95, delta=0.03)
        self.assertAlmostEqual(row.extras["cp_boot_percentile"], 0.95, delta=0.03)

    def test_remainder_level_shrinks_with_n(self):
        _, cells = _study(sizes="200,500,1000", reps=300)
        means = [mean for _, mean, _, _ in cn_tracker(r for records in cells.values() for r in records)]
        self.assertEqual(len(means), 3)
        self.assertEqual(means, sorted(means, reverse=True))
        self.assertLess(means[-1], 0.5 * means[0])

    def test_leave_one_out_perturbations_vanish(self):
        truth = DgpTruth()
        pipeline = EstimatorPipeline(mode="fitted", truth=truth)
        values = [
            loo_perturbations(gen_aipw_iid(1000, truth, replicate_generator(12, 0, r)), truth, pipeline).c_n
            for r in range(200)
        ]
        self.assertLessEqual(float(np.mean(values)), 0.1 * sigma2_eif(truth))


@unittest.skipUnless(SLOW, "set ALEVAR_RUN_SLOW=1 for Monte Carlo acceptance checks")
class NearBoundaryTests(unittest.TestCase):
    def test_scaled_remainder_variance_matches_calibration(self):
        truth, near = DgpTruth(), NearBoundaryConfig()
        pipeline = EstimatorPipeline(mode="near-boundary", truth=truth, near_boundary=near)
        remainders = []
        for r in range(2000):
            data = gen_aipw_iid(1000, truth, replicate_generator(20, 0, r))
            remainders.append(remainder_oracle(pipeline.estimate(data), data, truth).r_rem)
        scaled = 1000 * float(np.var(remainders, ddof=1))
        self.assertAlmostEqual(scaled / c_r_at(1000, truth, near), 1.0, delta=0.15)

    def test_sandwich_undercovers_while_jackknife_holds(self):
        config = build_config(
            {
                "study_kind": "near-boundary",
                "sizes": "500,1000,2000",
                "reps": 500,
                "boot_b": 0,
                "methods": "sand-wald,jk-wald,hc-wald",
                "worker_count": WORKERS,
            }
        )
        report, _ = run_cells(config)
        self.assertEqual(report.metadata["regime"]["verdict"], "near-boundary")
        for row in report.rows:
            with self.subTest(size=row.size):
                self.assertLessEqual(row.cp_sand, 0.93)
                self.assertGreaterEqual(row.cp_jk, 0.92)
                self.assertLessEqual(row.cp_jk, 0.98)
        truth = DgpTruth()
        expected = 1.0 + c_r_at(2000, truth, NearBoundaryConfig()) / sigma2_eif(truth)
        self.assertAlmostEqual(report.row(2000).extras["mean_rho"], expected, delta=0.08)

    def test_remainder_level_settles_at_calibrated_value(self):
        truth = DgpTruth()
        _, cells = _study(study_kind="near-boundary", sizes="500,1000", reps=500)
        reference = calibrate(truth, NearBoundaryConfig(), (500, 1000)).c_r_at
        rows = cn_tracker(r for records in cells.values() for r in records)
        self.assertEqual([n for n, _, _, _ in rows], [500, 1000])
        for n, mean, _, count in rows:
            with self.subTest(size=n):
                self.assertGreaterEqual(count, 475)
                self.assertAlmostEqual(mean / reference[n], 1.0, delta=0.25)
        self.assertLess(rows[1][2], rows[0][2])
        decomposition = decomposition_oracle(cells[(1000, 0.0)])
        self.assertLessEqual(abs(decomposition.closure_gap), 3.0 * decomposition.mc_se_total)


@unittest.skipUnless(SLOW, "set ALEVAR_RUN_SLOW=1 for Monte Carlo acceptance checks")
class ClusteredTests(unittest.TestCase):
    def test_jackknife_excess_grows_with_icc(self):
        config = build_config(
            {
                "study_kind": "clustered-icc-sweep",
                "sizes": "30",
                "icc_values": "0.01,0.05,0.10,0.20",
                "reps": 300,
                "boot_b": 0,
                "methods": "sand-wald,jk-wald,hc-wald",
                "worker_count": WORKERS,
            }
        )
        report, _ = run_cells(config)
        gaps = [report.row(30, icc).extras["mean_gap"] for icc in (0.01, 0.05, 0.10, 0.20)]
        for lower, higher in zip(gaps, gaps[1:]):
            self.assertLess(lower, higher)

    def test_jackknife_excess_grows_with_cluster_size(self):
        gaps = {}
        for m in (10, 40):
            report, _ = _study(
                study_kind="clustered-icc-sweep", sizes="30", icc_values="0.05", cluster_size=m, reps=300
            )
            gaps[m] = report.row(30, 0.05).extras["mean_gap"]
        self.assertGreater(gaps[10], 0.0)
        self.assertGreater(gaps[40], gaps[10])

    def test_cluster_bootstrap_coverage_at_thirty_clusters(self):
        config = build_config(
            {
                "study_kind": "clustered-icc-sweep",
                "sizes": "30",
                "icc_values": "0.05",
                "reps": 500,
                "boot_b": 200,
                "methods": "sand-wald,jk-wald,boot-wald,hc-wald",
                "worker_count": WORKERS,
            }
        )
        report, _ = run_cells(config)
        row = report.row(30, 0.05)
        self.assertGreaterEqual(row.cp_boot, 0.90)
        self.assertLessEqual(row.cp_boot, 0.96)
        self.assertFalse(math.isnan(row.rho_hat))


if __name__ == "__main__":
    unittest.main()
