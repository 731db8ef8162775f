"""AIPW point estimation with influence scores, and truth-aware simulation oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import bittensor as bt
import numpy as np
from scipy.special import expit

from alevar import constants
from alevar.core.dgp import DgpTruth, NearBoundaryConfig
from alevar.core.errors import (
    RECOVERABLE_ERRORS,
    InvalidSizeError,
    JackknifeRefitError,
    PositivityError,
    failure_code,
)
from alevar.core.models import Dataset, EstimateResult, LooPerturbations, Observation, RemainderOracle
from alevar.core.nuisance import (
    NuisancePair,
    design_outcome,
    design_propensity,
    fit_logistic,
    fit_ols,
    loo_ols_all,
    loo_refit_logistic,
)

PIPELINE_MODES = ("fitted", "oracle", "near-boundary")


def _aipw_terms(q1, q0, g, a, y):
    return q1 - q0 + a / g * (y - q1) - (1 - a) / (1.0 - g) * (y - q0)


def aipw(data: Dataset, nuis: NuisancePair, *, g_min: float = constants.G_MIN) -> EstimateResult:
    """AIPW estimate of the ATE; scores are the per-unit summands minus psi_hat."""
    if len(data) == 0:
        raise InvalidSizeError("AIPW needs at least one row")
    w, a, y = data.w, data.a, data.y
    g = nuis.g(w)
    outside = np.flatnonzero(~((g > g_min) & (g < 1.0 - g_min)))
    if outside.size:
        raise PositivityError(
            f"{outside.size} propensities outside ({g_min}, {1.0 - g_min}); first rows {outside[:10].tolist()}",
            rows=outside,
        )
    terms = _aipw_terms(nuis.q(1, w), nuis.q(0, w), g, a, y)
    psi_hat = float(np.mean(terms))
    scores = terms - psi_hat
    cluster_scores = None
    if data.cluster_id is not None:
        cluster_scores = np.bincount(data.cluster_id, weights=scores)
    return EstimateResult(psi_hat=psi_hat, scores=scores, cluster_scores=cluster_scores)


def true_eif(obs: Observation, truth: DgpTruth) -> float:
    """D*(O) under the generating mechanism."""
    g = float(truth.g0(obs.w))
    q1 = truth.q0(1, obs.w)
    q0 = truth.q0(0, obs.w)
    return float(_aipw_terms(q1, q0, g, obs.a, obs.y) - truth.psi0)


def true_eif_scores(data: Dataset, truth: DgpTruth) -> np.ndarray:
    g = truth.g0(data.w)
    return _aipw_terms(truth.q0(1, data.w), truth.q0(0, data.w), g, data.a, data.y) - truth.psi0


def remainder_oracle(result: EstimateResult, data: Dataset, truth: DgpTruth) -> RemainderOracle:
    true_scores = true_eif_scores(data, truth)
    mean_true_d = float(np.mean(true_scores))
    r_rem = result.psi_hat - truth.psi0 - mean_true_d
    return RemainderOracle(r_rem=r_rem, mean_true_d=mean_true_d, true_scores=true_scores)


@dataclass
class EstimatorPipeline:
    """
    Full data -> psi_hat pipeline (nuisances then AIPW). Instances are callable,
    so they plug straight into the jackknife and bootstrap routines.
    """

    mode: str = "fitted"
    truth: Optional[DgpTruth] = None
    near_boundary: Optional[NearBoundaryConfig] = None
    interaction: bool = True
    g_min: float = constants.G_MIN

    def __post_init__(self) -> None:
        if self.mode not in PIPELINE_MODES:
            raise ValueError(f"unknown pipeline mode {self.mode!r}")
        if self.mode != "fitted" and self.truth is None:
            raise ValueError(f"{self.mode} pipeline needs the truth")
        if self.mode == "near-boundary" and self.near_boundary is None:
            self.near_boundary = NearBoundaryConfig()

    def nuisances(self, data: Dataset) -> NuisancePair:
        if self.mode == "fitted":
            return NuisancePair.fitted(data, interaction=self.interaction)
        if self.mode == "oracle":
            return NuisancePair.oracle(self.truth)
        return NuisancePair.near_boundary(data, self.truth, self.near_boundary)

    def estimate(self, data: Dataset) -> EstimateResult:
        return aipw(data, self.nuisances(data), g_min=self.g_min)

    def __call__(self, data: Dataset) -> float:
        return self.estimate(data).psi_hat

    def loo_estimates(self, data: Dataset) -> np.ndarray:
        """Psi-hat with each row deleted in turn; raises listing every failed index."""
        if self.mode == "fitted":
            return self._fitted_loo(data)
        return _generic_loo(self, data)

    def cluster_loo_estimates(self, data: Dataset) -> np.ndarray:
        if data.cluster_id is None:
            return self.loo_estimates(data)
        labels = np.unique(data.cluster_id)
        estimates = np.empty(labels.size)
        failures: Dict[int, str] = {}
        for k, j in enumerate(labels.tolist()):
            try:
                estimates[k] = self(data.drop_cluster(j))
            except RECOVERABLE_ERRORS as exc:
                failures[int(j)] = failure_code(exc)
                estimates[k] = np.nan
        if failures:
            raise JackknifeRefitError(f"{len(failures)} cluster deletions failed", failures=failures)
        return estimates

    def _fitted_loo(self, data: Dataset) -> np.ndarray:
        n = len(data)
        w, a, y = data.w, data.a, data.y
        ols = fit_ols(data, interaction=self.interaction)
        glm = fit_logistic(data)
        q_coefs = loo_ols_all(ols, data)
        x1 = design_outcome(np.ones(n), w, interaction=self.interaction)
        x0 = design_outcome(np.zeros(n), w, interaction=self.interaction)
        xg = design_propensity(w)
        estimates = np.empty(n)
        failures: Dict[int, str] = {}
        keep = np.ones(n, dtype=bool)
        for i in range(n):
            try:
                g_fit = loo_refit_logistic(data, i, glm)
            except RECOVERABLE_ERRORS as exc:
                failures[i] = failure_code(exc)
                estimates[i] = np.nan
                continue
            keep[i] = False
            g = expit(xg[keep] @ g_fit.coefficients)
            if np.any((g <= self.g_min) | (g >= 1.0 - self.g_min)):
                failures[i] = PositivityError.code
                estimates[i] = np.nan
            else:
                terms = _aipw_terms(x1[keep] @ q_coefs[i], x0[keep] @ q_coefs[i], g, a[keep], y[keep])
                estimates[i] = float(np.mean(terms))
            keep[i] = True
        if failures:
            raise JackknifeRefitError(f"{len(failures)} leave-one-out refits failed", failures=failures)
        return estimates


def _generic_loo(estimate_fn: Callable[[Dataset], float], data: Dataset) -> np.ndarray:
    n = len(data)
    estimates = np.empty(n)
    failures: Dict[int, str] = {}
    for i in range(n):
        try:
            estimates[i] = estimate_fn(data.drop_index(i))
        except RECOVERABLE_ERRORS as exc:
            failures[i] = failure_code(exc)
            estimates[i] = np.nan
    if failures:
        raise JackknifeRefitError(f"{len(failures)} leave-one-out refits failed", failures=failures)
    return estimates


def perturbations_from_loo(
    psi_hat: float,
    loo_estimates: np.ndarray,
    true_scores: np.ndarray,
    psi0: float,
    failures: Optional[Dict[int, str]] = None,
) -> LooPerturbations:
    """delta_i, b_i and C_n from leave-one-out estimates and the true EIF values."""
    n = true_scores.size
    total = math.fsum(true_scores)
    remainder = psi_hat - psi0 - total / n
    loo_remainder = loo_estimates - psi0 - (total - true_scores) / (n - 1)
    b_values = loo_remainder - remainder
    deltas = (loo_estimates - psi_hat) + true_scores / n
    finite = np.isfinite(deltas)
    c_n = (n - 1) * math.fsum(deltas[finite] ** 2)
    return LooPerturbations(deltas=deltas, b_values=b_values, c_n=c_n, failures=dict(failures or {}))


def loo_perturbations(
    data: Dataset,
    truth: DgpTruth,
    estimator: EstimatorPipeline,
    *,
    max_units: int = constants.LOO_MAX_UNITS,
) -> LooPerturbations:
    """Refit the full pipeline on each deleted sample; failed indices are recorded, not fatal."""
    n = len(data)
    if n > max_units:
        raise InvalidSizeError(f"LOO perturbations capped at n <= {max_units}, got {n}")
    if n < 3:
        raise InvalidSizeError("LOO perturbations need n >= 3")
    psi_hat = estimator(data)
    failures: Dict[int, str] = {}
    try:
        loo = estimator.loo_estimates(data)
    except JackknifeRefitError as exc:
        failures = exc.failures
        bt.logging.warning(f"LOO refits failed | count={len(failures)} indices={sorted(failures)[:10]}")
        loo = np.array(
            [np.nan if i in failures else _safe_call(estimator, data.drop_index(i)) for i in range(n)]
        )
    return perturbations_from_loo(psi_hat, loo, true_eif_scores(data, truth), truth.psi0, failures)


def _safe_call(estimator: Callable[[Dataset], float], data: Dataset) -> float:
    try:
        return estimator(data)
    except RECOVERABLE_ERRORS:
        return float("nan")
