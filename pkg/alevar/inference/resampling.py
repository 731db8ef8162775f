"""
Variance estimators and confidence intervals: sandwich, leave-one-out and
leave-one-cluster-out jackknife, pairs and cluster bootstrap, BCa, the
HC-corrected sandwich and Wald intervals with z or t critical values.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import bittensor as bt
import numpy as np
from scipy import stats
from scipy.special import ndtr

from alevar import constants
from alevar.core.errors import (
    RECOVERABLE_ERRORS,
    BootstrapDegeneracyError,
    DegenerateDistributionError,
    DivisionDegenerateError,
    InvalidLevelError,
    InvalidSizeError,
    JackknifeRefitError,
    failure_code,
)
from alevar.core.models import ConfidenceInterval, Dataset, VarianceReport
from alevar.utils.streams import SeedLike, make_generator

EstimateFn = Callable[[Any], float]

CI_METHODS = ("sand-wald", "jk-wald", "boot-wald", "boot-percentile", "bca", "hc-wald")

_T_PATTERN = re.compile(r"^t\((\d+)\)$")


@dataclass(frozen=True)
class Critical:
    """Critical-value family: standard normal or Student t with ``df`` degrees of freedom."""

    kind: str = "z"
    df: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in ("z", "t"):
            raise ValueError(f"unknown critical family {self.kind!r}")
        if self.kind == "t" and (self.df is None or self.df < 1):
            raise ValueError("t critical values need df >= 1")

    @classmethod
    def parse(cls, value: Union[str, "Critical"]) -> "Critical":
        if isinstance(value, Critical):
            return value
        text = str(value).strip().lower()
        if text == "z":
            return cls("z")
        match = _T_PATTERN.match(text)
        if match:
            return cls("t", int(match.group(1)))
        raise ValueError(f"cannot parse critical value {value!r}; use 'z' or 't(df)'")

    def __str__(self) -> str:
        return "z" if self.kind == "z" else f"t({self.df})"


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    variance: float
    replicates: np.ndarray
    retries: int = 0

    def __iter__(self):
        # Unpacks as (variance, replicates).
        yield self.variance
        yield self.replicates


def _sum_sq_dev(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    centre = math.fsum(values) / values.size
    return math.fsum((values - centre) ** 2)


def _check_level(level: float) -> None:
    if not 0.0 < float(level) < 1.0:
        raise InvalidLevelError(f"confidence level must lie in (0, 1), got {level}")


def critical_value(level: float, critical: Union[str, Critical] = "z") -> float:
    _check_level(level)
    crit = Critical.parse(critical)
    upper = 1.0 - (1.0 - float(level)) / 2.0
    if crit.kind == "z":
        return float(stats.norm.ppf(upper))
    return float(stats.t.ppf(upper, crit.df))


# ---------------------------------------------------------------------------
# Analytic variances
# ---------------------------------------------------------------------------


def sandwich(scores: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    if n < 2:
        raise InvalidSizeError(f"sandwich needs n >= 2, got {n}")
    return _sum_sq_dev(scores) / ((n - 1) * n)


def cluster_sandwich(cluster_scores: np.ndarray, n_units: Optional[int] = None) -> float:
    """
    Sandwich over per-cluster score sums. Without ``n_units`` this is the unit
    formula applied at cluster level; with it, the variance of a mean over
    ``n_units`` rows: J/(J-1) * sum (S_j - S_bar)^2 / n_units^2.
    """
    cluster_scores = np.asarray(cluster_scores, dtype=float)
    j = cluster_scores.size
    if j < 2:
        raise InvalidSizeError(f"cluster sandwich needs J >= 2, got {j}")
    if n_units is None:
        return _sum_sq_dev(cluster_scores) / ((j - 1) * j)
    n_units = int(n_units)
    return j * _sum_sq_dev(cluster_scores) / ((j - 1) * n_units * n_units)


# ---------------------------------------------------------------------------
# Jackknife
# ---------------------------------------------------------------------------


def _drop(data: Any, i: int) -> Any:
    if isinstance(data, Dataset):
        return data.drop_index(i)
    return np.delete(np.asarray(data), i, axis=0)


def take_rows(data: Any, indices: np.ndarray) -> Any:
    if isinstance(data, Dataset):
        return data.take(indices)
    return np.asarray(data)[indices]


def _jackknife_variance(estimates: np.ndarray) -> float:
    k = estimates.size
    return (k - 1) / k * _sum_sq_dev(estimates)


def jackknife(estimate_fn: EstimateFn, data: Any) -> Tuple[float, np.ndarray]:
    """((n-1)/n) * sum (psi_(-i) - mean)^2 over every deleted sample; no index may fail."""
    n = len(data)
    if n < 3:
        raise InvalidSizeError(f"jackknife needs n >= 3, got {n}")
    fast = getattr(estimate_fn, "loo_estimates", None)
    if callable(fast) and isinstance(data, Dataset):
        loo = np.asarray(fast(data), dtype=float)
    else:
        loo = np.empty(n)
        failures = {}
        for i in range(n):
            try:
                loo[i] = estimate_fn(_drop(data, i))
            except RECOVERABLE_ERRORS as exc:
                failures[i] = failure_code(exc)
        if failures:
            raise JackknifeRefitError(f"{len(failures)} leave-one-out refits failed", failures=failures)
    return _jackknife_variance(loo), loo


def cluster_jackknife(estimate_fn: EstimateFn, data: Dataset) -> Tuple[float, np.ndarray]:
    """Delete whole clusters: ((J-1)/J) * sum (psi_(-j) - mean)^2."""
    if data.cluster_id is None:
        return jackknife(estimate_fn, data)
    labels = np.unique(data.cluster_id)
    j = labels.size
    if j < 3:
        raise InvalidSizeError(f"cluster jackknife needs J >= 3, got {j}")
    fast = getattr(estimate_fn, "cluster_loo_estimates", None)
    if callable(fast):
        loo = np.asarray(fast(data), dtype=float)
    else:
        loo = np.empty(j)
        failures = {}
        for k, label in enumerate(labels.tolist()):
            try:
                loo[k] = estimate_fn(data.drop_cluster(label))
            except RECOVERABLE_ERRORS as exc:
                failures[int(label)] = failure_code(exc)
        if failures:
            raise JackknifeRefitError(f"{len(failures)} cluster deletions failed", failures=failures)
    return _jackknife_variance(loo), loo


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def _bootstrap(
    estimate_fn: EstimateFn,
    draw: Callable[[np.random.Generator], Any],
    b: int,
    seed: SeedLike,
    max_retries: int,
) -> BootstrapResult:
    if int(b) < 2:
        raise InvalidSizeError(f"bootstrap needs B >= 2, got {b}")
    rng = make_generator(seed)
    replicates = np.empty(int(b))
    retries = 0
    for k in range(int(b)):
        attempts = 0
        while True:
            try:
                replicates[k] = estimate_fn(draw(rng))
                break
            except RECOVERABLE_ERRORS as exc:
                attempts += 1
                retries += 1
                if attempts > max_retries:
                    raise BootstrapDegeneracyError(
                        f"bootstrap replicate {k} failed {attempts} times; last failure {failure_code(exc)}"
                    ) from exc
                bt.logging.debug(f"bootstrap resample redrawn | replicate={k} attempt={attempts} code={failure_code(exc)}")
    if retries:
        bt.logging.debug(f"bootstrap finished with redraws | B={b} retries={retries}")
    return BootstrapResult(variance=_sum_sq_dev(replicates) / (b - 1), replicates=replicates, retries=retries)


def pairs_bootstrap(
    estimate_fn: EstimateFn,
    data: Any,
    B: int = constants.BOOT_B,
    seed: SeedLike = 0,
    *,
    max_retries: int = constants.BOOT_MAX_RETRIES,
) -> BootstrapResult:
    """Resample rows with replacement; variance uses divisor B-1."""
    n = len(data)

    def draw(rng: np.random.Generator) -> Any:
        return take_rows(data, rng.integers(0, n, size=n))

    return _bootstrap(estimate_fn, draw, B, seed, max_retries)


def cluster_bootstrap(
    estimate_fn: EstimateFn,
    data: Dataset,
    B: int = constants.BOOT_B,
    seed: SeedLike = 0,
    *,
    max_retries: int = constants.BOOT_MAX_RETRIES,
) -> BootstrapResult:
    """Resample whole clusters with replacement; duplicated clusters get fresh ids."""
    j = data.n_clusters

    def draw(rng: np.random.Generator) -> Dataset:
        return data.take_clusters(rng.integers(0, j, size=j))

    return _bootstrap(estimate_fn, draw, B, seed, max_retries)


# ---------------------------------------------------------------------------
# Intervals
# ---------------------------------------------------------------------------


def wald_interval(
    psi_hat: float,
    variance: float,
    level: float = constants.LEVEL,
    critical: Union[str, Critical] = "z",
    *,
    method: str = "jk-wald",
) -> ConfidenceInterval:
    if variance < 0 or not math.isfinite(variance):
        raise InvalidSizeError(f"variance must be finite and non-negative, got {variance}")
    crit = Critical.parse(critical)
    half = critical_value(level, crit) * math.sqrt(variance)
    return ConfidenceInterval(
        lower=psi_hat - half,
        upper=psi_hat + half,
        level=float(level),
        method=method,
        critical=str(crit),
    )


def percentile_interval(replicates: np.ndarray, level: float = constants.LEVEL) -> ConfidenceInterval:
    _check_level(level)
    alpha = 1.0 - float(level)
    lower, upper = np.quantile(
        np.asarray(replicates, dtype=float), [alpha / 2.0, 1.0 - alpha / 2.0], method="inverted_cdf"
    )
    return ConfidenceInterval(
        lower=float(lower), upper=float(upper), level=float(level), method="boot-percentile", critical="z"
    )


def bca_interval(
    replicates: np.ndarray,
    psi_hat: float,
    loo_estimates: np.ndarray,
    level: float = constants.LEVEL,
    *,
    min_replicates: int = constants.BCA_MIN_REPLICATES,
) -> ConfidenceInterval:
    """
    Bias-corrected and accelerated percentile interval. z0 comes from the share
    of replicates below psi_hat, the acceleration from jackknife skewness.
    """
    _check_level(level)
    replicates = np.asarray(replicates, dtype=float)
    loo_estimates = np.asarray(loo_estimates, dtype=float)
    b = replicates.size
    if b < min_replicates:
        raise InvalidSizeError(f"BCa needs at least {min_replicates} replicates, got {b}")
    if loo_estimates.size < 2:
        raise InvalidSizeError("BCa needs leave-one-out estimates")
    if np.ptp(replicates) == 0.0:
        raise DegenerateDistributionError("all bootstrap replicates are identical")

    notes = []
    share = float(np.count_nonzero(replicates < psi_hat)) / b
    if share <= 0.0 or share >= 1.0:
        clamped = min(max(share, 0.5 / b), 1.0 - 0.5 / b)
        bt.logging.warning(f"BCa bias correction infinite; share clamped | share={share} clamped={clamped} B={b}")
        notes.append(f"z0-clamped:{share:g}->{clamped:g}")
        share = clamped
    z0 = float(stats.norm.ppf(share))

    deviations = loo_estimates.mean() - loo_estimates
    squares = math.fsum(deviations**2)
    acceleration = 0.0 if squares == 0.0 else math.fsum(deviations**3) / (6.0 * squares**1.5)

    alpha = 1.0 - float(level)
    z = stats.norm.ppf([alpha / 2.0, 1.0 - alpha / 2.0])
    adjusted = ndtr(z0 + (z0 + z) / (1.0 - acceleration * (z0 + z)))
    # order statistics of the replicates, no interpolation between them
    lower, upper = np.quantile(replicates, adjusted, method="inverted_cdf")
    return ConfidenceInterval(
        lower=float(lower),
        upper=float(upper),
        level=float(level),
        method="bca",
        critical="z",
        notes=tuple(notes),
    )


def hc_corrected(var_sand: float, var_jk: float) -> Tuple[float, float]:
    """
    rho_hat = var_jk / var_sand and var_hc = rho_hat * var_sand. The product is
    var_jk algebraically; a last-ulp rounding difference is resolved to var_jk.
    """
    if not var_sand > 0.0:
        raise DivisionDegenerateError(f"HC correction needs var_sand > 0, got {var_sand}")
    rho_hat = var_jk / var_sand
    var_hc = rho_hat * var_sand
    if var_hc != var_jk:
        if not math.isclose(var_hc, var_jk, rel_tol=8 * np.finfo(float).eps, abs_tol=0.0):
            raise ArithmeticError(f"HC product {var_hc!r} departs from jackknife variance {var_jk!r}")
        var_hc = var_jk
    return var_hc, rho_hat


# ---------------------------------------------------------------------------
# Per-dataset variance suite
# ---------------------------------------------------------------------------

BOOTSTRAP_METHODS = ("boot-wald", "boot-percentile", "bca")


@dataclass(frozen=True, eq=False)
class VarianceSuite:
    estimate: Any
    report: VarianceReport
    intervals: Dict[str, ConfidenceInterval]
    method_failures: Dict[str, str]
    loo_estimates: np.ndarray


def variance_suite(
    data: Dataset,
    pipeline: Any,
    *,
    methods: Sequence[str] = CI_METHODS,
    level: float = constants.LEVEL,
    critical: Union[str, Critical] = "z",
    boot_b: int = constants.BOOT_B,
    seed: SeedLike = 0,
) -> VarianceSuite:
    """
    Estimate, every variance and every requested interval for one dataset.
    Clustered data use the cluster versions with the sandwich scaled to the
    row count. Estimation, jackknife and HC failures propagate; bootstrap
    failures are recorded against the bootstrap-based methods only.
    """
    unknown = sorted(set(methods) - set(CI_METHODS))
    if unknown:
        raise ValueError(f"unknown interval methods {unknown}")
    estimate = pipeline.estimate(data)
    clustered = data.is_clustered
    if clustered:
        var_sand = cluster_sandwich(estimate.cluster_scores, n_units=len(data))
        var_jk, loo = cluster_jackknife(pipeline, data)
    else:
        var_sand = sandwich(estimate.scores)
        var_jk, loo = jackknife(pipeline, data)
    var_hc, rho_hat = hc_corrected(var_sand, var_jk)

    failures: Dict[str, str] = {}
    boot: Optional[BootstrapResult] = None
    if any(m in BOOTSTRAP_METHODS for m in methods) and boot_b >= 2:
        sampler = cluster_bootstrap if clustered else pairs_bootstrap
        try:
            boot = sampler(pipeline, data, boot_b, seed)
        except RECOVERABLE_ERRORS as exc:
            for m in BOOTSTRAP_METHODS:
                failures[m] = failure_code(exc)

    report = VarianceReport(
        var_sand=var_sand,
        var_jk=var_jk,
        var_hc=var_hc,
        rho_hat=rho_hat,
        var_boot=None if boot is None else boot.variance,
        boot_replicates=None if boot is None else boot.replicates,
        boot_retries=0 if boot is None else boot.retries,
    )

    psi_hat = estimate.psi_hat
    intervals: Dict[str, ConfidenceInterval] = {}
    wald_variances = {"sand-wald": var_sand, "jk-wald": var_jk, "hc-wald": var_hc}
    for method in methods:
        if method in failures:
            continue
        try:
            if method in wald_variances:
                intervals[method] = wald_interval(psi_hat, wald_variances[method], level, critical, method=method)
            elif boot is None:
                failures[method] = "bootstrap-disabled"
            elif method == "boot-wald":
                intervals[method] = wald_interval(psi_hat, boot.variance, level, critical, method=method)
            elif method == "boot-percentile":
                intervals[method] = percentile_interval(boot.replicates, level)
            else:
                intervals[method] = bca_interval(boot.replicates, psi_hat, loo, level)
        except RECOVERABLE_ERRORS as exc:
            failures[method] = failure_code(exc)
    return VarianceSuite(
        estimate=estimate, report=report, intervals=intervals, method_failures=failures, loo_estimates=loo
    )
