import math
import unittest

import numpy as np

from alevar.core.dgp import DgpTruth, gen_aipw_iid
from alevar.core.errors import (
    BootstrapDegeneracyError,
    DegenerateDistributionError,
    DivisionDegenerateError,
    InvalidLevelError,
    InvalidSizeError,
    JackknifeRefitError,
)
from alevar.core.estimator import EstimatorPipeline
from alevar.core.models import Dataset
from alevar.inference.resampling import (
    CI_METHODS,
    Critical,
    bca_interval,
    cluster_bootstrap,
    cluster_jackknife,
    cluster_sandwich,
    critical_value,
    hc_corrected,
    jackknife,
    pairs_bootstrap,
    percentile_interval,
    sandwich,
    variance_suite,
    wald_interval,
)


def _mean(values):
    return float(np.mean(values))


def _mean_y(data):
    return float(np.mean(data.y))


def _toy_dataset(y, cluster_id=None):
    y = np.asarray(y, dtype=float)
    return Dataset(
        w=np.linspace(-1.0, 1.0, y.size),
        a=np.arange(y.size) % 2,
        y=y,
        cluster_id=cluster_id,
    )


class SandwichTests(unittest.TestCase):
    def test_two_opposite_scores_give_unit_variance(self):
        self.assertEqual(sandwich(np.array([-1.0, 1.0])), 1.0)

    def test_constant_scores_give_zero(self):
        self.assertEqual(sandwich(np.full(25, 3.5)), 0.0)

    def test_needs_two_scores(self):
        with self.assertRaises(InvalidSizeError):
            sandwich(np.array([1.0]))

    def test_singleton_clusters_match_unit_sandwich(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            scores = rng.standard_normal(40)
            self.assertEqual(cluster_sandwich(scores), sandwich(scores))

    def test_two_clusters_with_opposite_sums(self):
        self.assertAlmostEqual(cluster_sandwich(np.array([2.5, -2.5])), 6.25, places=12)

    def test_row_scaled_cluster_sandwich(self):
        sums = np.array([1.0, -1.0, 3.0, -3.0])
        expected = 4 * 20.0 / (3 * 40 * 40)
        self.assertAlmostEqual(cluster_sandwich(sums, n_units=40), expected, places=15)


class JackknifeTests(unittest.TestCase):
    def test_jackknife_of_mean_is_sample_variance_over_n(self):
        variance, loo = jackknife(_mean, np.arange(1.0, 6.0))
        self.assertAlmostEqual(variance, 0.5, places=12)
        self.assertEqual(loo.size, 5)

    def test_jackknife_of_mean_on_random_data(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            x = rng.standard_normal(30)
            variance, _ = jackknife(_mean, x)
            self.assertAlmostEqual(variance, float(np.var(x, ddof=1)) / x.size, delta=1e-12)

    def test_constant_data_gives_zero(self):
        variance, _ = jackknife(_mean, np.full(10, 2.0))
        self.assertEqual(variance, 0.0)

    def test_needs_three_rows(self):
        with self.assertRaises(InvalidSizeError):
            jackknife(_mean, np.array([1.0, 2.0]))

    def test_failed_refits_are_listed(self):
        def picky(x):
            if 0.0 not in x:
                raise ValueError("needs the zero row")
            return float(np.mean(x))

        with self.assertRaises(JackknifeRefitError) as ctx:
            jackknife(picky, np.arange(6.0))
        self.assertEqual(ctx.exception.failed_indices, [0])

    def test_cluster_jackknife_with_singletons_matches_unit_jackknife(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal(20)
        plain = _toy_dataset(y)
        singletons = _toy_dataset(y, cluster_id=np.arange(20))
        unit_var, unit_loo = jackknife(_mean_y, plain)
        cluster_var, cluster_loo = cluster_jackknife(_mean_y, singletons)
        self.assertEqual(unit_var, cluster_var)
        np.testing.assert_array_equal(unit_loo, cluster_loo)

    def test_cluster_jackknife_three_cluster_example(self):
        data = _toy_dataset([1.0, 2.0, 3.0, 6.0, 6.0, 6.0], cluster_id=[0, 0, 1, 2, 2, 2])
        variance, loo = cluster_jackknife(_mean_y, data)
        np.testing.assert_allclose(loo, [5.25, 4.2, 2.0], rtol=0, atol=1e-12)
        self.assertAlmostEqual(variance, 3301.0 / 900.0, places=12)

    def test_cluster_jackknife_needs_three_clusters(self):
        data = _toy_dataset([1.0, 2.0, 3.0, 4.0], cluster_id=[0, 0, 1, 1])
        with self.assertRaises(InvalidSizeError):
            cluster_jackknife(_mean_y, data)


class BootstrapTests(unittest.TestCase):
    def test_constant_data_gives_zero_variance(self):
        result = pairs_bootstrap(_mean, np.full(30, 1.5), B=50, seed=1)
        self.assertEqual(result.variance, 0.0)

    def test_needs_two_replicates(self):
        with self.assertRaises(InvalidSizeError):
            pairs_bootstrap(_mean, np.arange(10.0), B=1, seed=1)

    def test_same_seed_same_replicates(self):
        x = np.random.default_rng(5).standard_normal(40)
        first = pairs_bootstrap(_mean, x, B=100, seed=99)
        second = pairs_bootstrap(_mean, x, B=100, seed=99)
        np.testing.assert_array_equal(first.replicates, second.replicates)
        variance, replicates = first
        self.assertEqual(variance, first.variance)
        self.assertIs(replicates, first.replicates)

    def test_bootstrap_variance_of_mean(self):
        x = np.random.default_rng(17).standard_normal(10_000)
        result = pairs_bootstrap(_mean, x, B=2000, seed=2024)
        target = float(np.var(x, ddof=1)) / x.size
        self.assertLess(abs(result.variance / target - 1.0), 0.10)

    def test_failed_resamples_are_redrawn(self):
        def picky(x):
            if np.count_nonzero(x == 0.0) >= 3:
                raise ValueError("too many zeros")
            return float(np.mean(x))

        result = pairs_bootstrap(picky, np.arange(10.0), B=200, seed=8)
        self.assertEqual(result.replicates.size, 200)
        self.assertGreater(result.retries, 0)

    def test_exhausted_retries_raise(self):
        def always_fails(_):
            raise ValueError("no")

        with self.assertRaises(BootstrapDegeneracyError):
            pairs_bootstrap(always_fails, np.arange(10.0), B=5, seed=0, max_retries=3)

    def test_cluster_bootstrap_with_singletons_matches_pairs(self):
        y = np.random.default_rng(23).standard_normal(25)
        pairs = pairs_bootstrap(_mean_y, _toy_dataset(y), B=60, seed=4)
        clusters = cluster_bootstrap(_mean_y, _toy_dataset(y, cluster_id=np.arange(25)), B=60, seed=4)
        np.testing.assert_array_equal(pairs.replicates, clusters.replicates)


class IntervalTests(unittest.TestCase):
    def test_critical_values(self):
        self.assertAlmostEqual(critical_value(0.95, "z"), 1.959964, delta=1e-5)
        self.assertAlmostEqual(critical_value(0.95, "t(9)"), 2.262157, delta=1e-4)

    def test_critical_parsing(self):
        self.assertEqual(Critical.parse("t(9)"), Critical("t", 9))
        self.assertEqual(str(Critical.parse("Z")), "z")
        with self.assertRaises(ValueError):
            Critical.parse("t")

    def test_invalid_level(self):
        with self.assertRaises(InvalidLevelError):
            critical_value(1.0)
        with self.assertRaises(InvalidLevelError):
            wald_interval(0.0, 1.0, level=0.0)

    def test_zero_variance_gives_point_interval(self):
        ci = wald_interval(0.4, 0.0)
        self.assertEqual((ci.lower, ci.upper), (0.4, 0.4))
        self.assertTrue(ci.contains(0.4))

    def test_negative_variance_rejected(self):
        with self.assertRaises(InvalidSizeError):
            wald_interval(0.4, -1e-3)

    def test_wald_uses_requested_critical(self):
        ci = wald_interval(1.0, 4.0, 0.95, "t(9)")
        self.assertAlmostEqual(ci.upper - 1.0, 2.0 * critical_value(0.95, "t(9)"), places=12)
        self.assertEqual(ci.critical, "t(9)")

    def test_bca_without_skew_or_bias_matches_percentile(self):
        replicates = np.linspace(-1.0, 1.0, 100)
        bca = bca_interval(replicates, 0.0, np.array([-1.0, 0.0, 1.0]))
        pct = percentile_interval(replicates)
        self.assertAlmostEqual(bca.lower, pct.lower, places=10)
        self.assertAlmostEqual(bca.upper, pct.upper, places=10)
        self.assertEqual(bca.notes, ())

    def test_bca_endpoints_are_order_statistics(self):
        replicates = np.arange(1.0, 101.0)
        ci = bca_interval(replicates, 50.5, np.array([-1.0, 0.0, 1.0]))
        self.assertEqual((ci.lower, ci.upper), (3.0, 98.0))
        pct = percentile_interval(replicates[::-1])
        self.assertEqual((pct.lower, pct.upper), (3.0, 98.0))

    def test_bca_rejects_identical_replicates(self):
        with self.assertRaises(DegenerateDistributionError):
            bca_interval(np.full(100, 0.3), 0.3, np.array([0.1, 0.2, 0.3]))

    def test_bca_needs_enough_replicates(self):
        with self.assertRaises(InvalidSizeError):
            bca_interval(np.linspace(0.0, 1.0, 20), 0.5, np.array([0.4, 0.5, 0.6]))

    def test_bca_clamps_one_sided_replicates(self):
        replicates = np.linspace(1.0, 2.0, 80)
        ci = bca_interval(replicates, 0.0, np.array([-0.2, 0.0, 0.1, 0.1]))
        self.assertTrue(ci.notes)
        self.assertTrue(ci.notes[0].startswith("z0-clamped"))
        self.assertLessEqual(ci.lower, ci.upper)


class HcCorrectionTests(unittest.TestCase):
    def test_reference_pair(self):
        var_hc, rho = hc_corrected(2.0, 3.0)
        self.assertEqual(var_hc, 3.0)
        self.assertEqual(rho, 1.5)

    def test_corrected_variance_equals_jackknife_bitwise(self):
        rng = np.random.default_rng(1234)
        for _ in range(1000):
            var_sand = float(rng.uniform(1e-8, 10.0))
            var_jk = float(rng.uniform(0.0, 10.0))
            var_hc, _ = hc_corrected(var_sand, var_jk)
            self.assertEqual(var_hc, var_jk)

    def test_zero_sandwich_is_degenerate(self):
        with self.assertRaises(DivisionDegenerateError):
            hc_corrected(0.0, 1.0)


class VarianceSuiteTests(unittest.TestCase):
    def setUp(self):
        self.truth = DgpTruth()
        self.data = gen_aipw_iid(120, self.truth, 31)
        self.pipeline = EstimatorPipeline(mode="fitted", truth=self.truth)

    def test_full_suite_produces_every_interval(self):
        suite = variance_suite(self.data, self.pipeline, boot_b=60, seed=5)
        report = suite.report
        self.assertEqual(report.var_hc, report.var_jk)
        self.assertAlmostEqual(report.rho_hat, report.var_jk / report.var_sand, places=14)
        self.assertIsNotNone(report.var_boot)
        for method in CI_METHODS:
            if method not in suite.method_failures:
                self.assertIn(method, suite.intervals)
        self.assertEqual(suite.loo_estimates.size, len(self.data))

    def test_disabled_bootstrap_is_recorded(self):
        suite = variance_suite(self.data, self.pipeline, boot_b=0)
        for method in ("boot-wald", "boot-percentile", "bca"):
            self.assertEqual(suite.method_failures[method], "bootstrap-disabled")
        self.assertIn("jk-wald", suite.intervals)
        self.assertIsNone(suite.report.var_boot)

    def test_unknown_method_rejected(self):
        with self.assertRaises(ValueError):
            variance_suite(self.data, self.pipeline, methods=("jk-wald", "magic"))

    def test_sandwich_matches_scores(self):
        suite = variance_suite(self.data, self.pipeline, methods=("sand-wald",), boot_b=0)
        self.assertEqual(suite.report.var_sand, sandwich(suite.estimate.scores))
        ci = suite.intervals["sand-wald"]
        half = critical_value(0.95) * math.sqrt(suite.report.var_sand)
        self.assertAlmostEqual(ci.width, 2.0 * half, places=12)

    def test_variances_scale_with_the_outcome(self):
        scaled = self.data.with_outcomes(3.0 * self.data.y)
        methods = ("sand-wald", "jk-wald", "boot-wald")
        base = variance_suite(self.data, self.pipeline, methods=methods, boot_b=80, seed=12).report
        tripled = variance_suite(scaled, self.pipeline, methods=methods, boot_b=80, seed=12).report
        for name in ("var_sand", "var_jk", "var_boot"):
            with self.subTest(variance=name):
                self.assertAlmostEqual(getattr(tripled, name) / getattr(base, name), 9.0, delta=1e-8)
        np.testing.assert_allclose(tripled.boot_replicates, 3.0 * base.boot_replicates, rtol=1e-10, atol=1e-12)
        self.assertAlmostEqual(tripled.rho_hat, base.rho_hat, delta=1e-10)


if __name__ == "__main__":
    unittest.main()
