"""
Nuisance estimation: OLS outcome regression with interaction, quadratic-logistic
propensity by damped Newton-Raphson, and exact fast leave-one-out refits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import bittensor as bt
import numpy as np
from scipy.special import expit

from alevar import constants
from alevar.core.dgp import DgpTruth, NearBoundaryConfig, NuisanceShift, nuisance_shift
from alevar.core.errors import (
    DegenerateResponseError,
    InvalidSizeError,
    NonConvergenceError,
    SingularDesignError,
    SingularDowndateError,
)
from alevar.core.models import Dataset, Observation

NUISANCE_MODES = ("fitted", "oracle", "near-boundary")
# Rounding-level tolerance when comparing log-likelihoods across a Newton step.
_LL_SLACK = 64 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class LinearFit:
    coefficients: np.ndarray
    gram_inverse: np.ndarray
    n_used: int
    interaction: bool = True


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float = float("nan")


def design_outcome(a, w, *, interaction: bool = True) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    w = np.asarray(w, dtype=float)
    columns = [np.ones_like(w), a, w]
    if interaction:
        columns.append(a * w)
    return np.column_stack(columns)


def design_propensity(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.column_stack([np.ones_like(w), w, w * w])


# ---------------------------------------------------------------------------
# Outcome regression
# ---------------------------------------------------------------------------


def fit_ols_design(x: np.ndarray, y: np.ndarray, *, interaction: bool = True) -> LinearFit:
    n, p = x.shape
    if n < p + 1:
        raise InvalidSizeError(f"need more rows than columns, got n={n}, p={p}")
    if np.linalg.matrix_rank(x) < p:
        raise SingularDesignError(f"design matrix is rank deficient (p={p})")
    gram = x.T @ x
    try:
        gram_inverse = np.linalg.inv(gram)
        coefficients = np.linalg.solve(gram, x.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(f"normal equations are singular: {exc}") from exc
    return LinearFit(coefficients=coefficients, gram_inverse=gram_inverse, n_used=n, interaction=interaction)


def fit_ols(data: Dataset, *, interaction: bool = True) -> LinearFit:
    if len(data) < 5:
        raise InvalidSizeError(f"OLS needs n >= 5, got {len(data)}")
    x = design_outcome(data.a, data.w, interaction=interaction)
    return fit_ols_design(x, data.y, interaction=interaction)


def predict_q(fit: LinearFit, a, w):
    return design_outcome(np.broadcast_to(a, np.shape(w)), w, interaction=fit.interaction) @ fit.coefficients


def loo_downdate_ols(fit: LinearFit, data: Dataset, i: int) -> LinearFit:
    """Remove row i from ``fit`` with a Sherman-Morrison rank-one downdate."""
    if fit.n_used < 6:
        raise InvalidSizeError(f"downdate needs n_used >= 6, got {fit.n_used}")
    if not -len(data) <= i < len(data):
        raise IndexError(f"row index {i} out of range for n={len(data)}")
    x = design_outcome([data.a[i]], [data.w[i]], interaction=fit.interaction)[0]
    gx = fit.gram_inverse @ x
    leverage = float(x @ gx)
    if 1.0 - leverage <= 1e-12:
        raise SingularDowndateError(f"row {i} has leverage {leverage:.12g}; removing it makes the design singular")
    residual = float(data.y[i] - x @ fit.coefficients)
    gram_inverse = fit.gram_inverse + np.outer(gx, gx) / (1.0 - leverage)
    coefficients = fit.coefficients - gx * (residual / (1.0 - leverage))
    return LinearFit(coefficients=coefficients, gram_inverse=gram_inverse, n_used=fit.n_used - 1, interaction=fit.interaction)


def update_ols(fit: LinearFit, obs: Observation) -> LinearFit:
    """Add one observation to ``fit`` (the inverse of :func:`loo_downdate_ols`)."""
    x = design_outcome([obs.a], [obs.w], interaction=fit.interaction)[0]
    gx = fit.gram_inverse @ x
    leverage = float(x @ gx)
    gram_inverse = fit.gram_inverse - np.outer(gx, gx) / (1.0 + leverage)
    coefficients = fit.coefficients + gram_inverse @ x * float(obs.y - x @ fit.coefficients)
    return LinearFit(coefficients=coefficients, gram_inverse=gram_inverse, n_used=fit.n_used + 1, interaction=fit.interaction)


def loo_ols_all(fit: LinearFit, data: Dataset) -> np.ndarray:
    """Leave-one-out coefficients for every row at once, shape (n, p)."""
    x = design_outcome(data.a, data.w, interaction=fit.interaction)
    gx = x @ fit.gram_inverse
    leverage = np.einsum("ij,ij->i", gx, x)
    if np.any(1.0 - leverage <= 1e-12):
        bad = np.flatnonzero(1.0 - leverage <= 1e-12).tolist()
        raise SingularDowndateError(f"rows {bad} have unit leverage")
    residual = data.y - x @ fit.coefficients
    return fit.coefficients[None, :] - gx * (residual / (1.0 - leverage))[:, None]


# ---------------------------------------------------------------------------
# Propensity
# ---------------------------------------------------------------------------


def log_likelihood(coefficients: np.ndarray, x: np.ndarray, a: np.ndarray) -> float:
    eta = x @ coefficients
    return float(np.sum(a * eta - np.logaddexp(0.0, eta)))


def score(coefficients: np.ndarray, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    return x.T @ (a - expit(x @ coefficients))


def information(coefficients: np.ndarray, x: np.ndarray) -> np.ndarray:
    p = expit(x @ coefficients)
    return x.T @ (x * (p * (1.0 - p))[:, None])


def _newton(
    x: np.ndarray,
    a: np.ndarray,
    start: np.ndarray,
    *,
    tol: float,
    max_iter: int,
) -> LogisticFit:
    beta = np.array(start, dtype=float, copy=True)
    current = log_likelihood(beta, x, a)
    for iteration in range(max_iter + 1):
        grad = score(beta, x, a)
        if float(np.max(np.abs(grad))) <= tol:
            if float(np.max(np.abs(x @ beta))) > constants.SEPARATION_ETA:
                raise NonConvergenceError(
                    "fitted probabilities reached 0 or 1 (separation)",
                    last_iterate=beta,
                    iterations=iteration,
                )
            return LogisticFit(coefficients=beta, converged=True, iterations=iteration, log_likelihood=current)
        if iteration == max_iter:
            break
        try:
            step = np.linalg.solve(information(beta, x), grad)
        except np.linalg.LinAlgError as exc:
            raise NonConvergenceError(
                f"singular information matrix at iteration {iteration}: {exc}",
                last_iterate=beta,
                iterations=iteration,
            ) from exc

        scale = 1.0
        for _ in range(constants.NEWTON_MAX_HALVINGS + 1):
            candidate = beta + scale * step
            value = log_likelihood(candidate, x, a)
            if np.isfinite(value) and value >= current - _LL_SLACK * max(1.0, abs(current)):
                break
            scale *= 0.5
        else:
            raise NonConvergenceError(
                "step-halving exhausted without likelihood increase",
                last_iterate=beta,
                iterations=iteration,
            )
        beta, current = candidate, value
        if float(np.max(np.abs(x @ beta))) > 2.0 * constants.SEPARATION_ETA:
            raise NonConvergenceError("linear predictor diverging (separation)", last_iterate=beta, iterations=iteration + 1)

    raise NonConvergenceError(
        f"no convergence after {max_iter} iterations",
        last_iterate=beta,
        iterations=max_iter,
    )


def _check_classes(a: np.ndarray) -> None:
    treated = int(np.sum(a))
    if treated == 0 or treated == a.size:
        raise DegenerateResponseError("treatment has a single class; propensity is not estimable")


def fit_logistic(
    data: Dataset,
    tol: float = constants.NEWTON_TOL,
    max_iter: int = constants.NEWTON_MAX_ITER,
    *,
    start: Optional[np.ndarray] = None,
) -> LogisticFit:
    a = data.a.astype(float)
    _check_classes(a)
    x = design_propensity(data.w)
    if start is None:
        share = float(a.mean())
        start = np.zeros(x.shape[1])
        start[0] = np.log(share / (1.0 - share))
    return _newton(x, a, np.asarray(start, dtype=float), tol=tol, max_iter=max_iter)


def predict_g(fit: LogisticFit, w):
    return expit(design_propensity(w) @ fit.coefficients)


def loo_refit_logistic(
    data: Dataset,
    i: int,
    warm: LogisticFit,
    tol: float = constants.NEWTON_TOL,
    max_iter: int = constants.NEWTON_MAX_ITER,
) -> LogisticFit:
    """Newton refit on ``data`` without row i, warm-started at the full-data fit."""
    if not -len(data) <= i < len(data):
        raise IndexError(f"row index {i} out of range for n={len(data)}")
    return fit_logistic(data.drop_index(i), tol=tol, max_iter=max_iter, start=warm.coefficients)


# ---------------------------------------------------------------------------
# Nuisance pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisancePair:
    """Outcome regression and propensity in exactly one of the three modes."""

    mode: str
    q_fit: Optional[LinearFit] = None
    g_fit: Optional[LogisticFit] = None
    truth: Optional[DgpTruth] = None
    shift: Optional[NuisanceShift] = None

    def __post_init__(self) -> None:
        if self.mode not in NUISANCE_MODES:
            raise ValueError(f"unknown nuisance mode {self.mode!r}")
        if self.mode == "fitted" and (self.q_fit is None or self.g_fit is None):
            raise ValueError("fitted mode needs both fits")
        if self.mode == "oracle" and self.truth is None:
            raise ValueError("oracle mode needs the truth")
        if self.mode == "near-boundary" and (self.truth is None or self.shift is None):
            raise ValueError("near-boundary mode needs the truth and a realised shift")

    @classmethod
    def fitted(cls, data: Dataset, *, interaction: bool = True) -> "NuisancePair":
        return cls(mode="fitted", q_fit=fit_ols(data, interaction=interaction), g_fit=fit_logistic(data))

    @classmethod
    def oracle(cls, truth: DgpTruth) -> "NuisancePair":
        return cls(mode="oracle", truth=truth)

    @classmethod
    def near_boundary(cls, data: Dataset, truth: DgpTruth, config: NearBoundaryConfig) -> "NuisancePair":
        shift = nuisance_shift(data, truth, config)
        bt.logging.debug(
            f"near-boundary shift | q_amp={shift.q_amplitude:.6g} g_amp={shift.g_amplitude:.6g} mechanism={shift.mechanism}"
        )
        return cls(mode="near-boundary", truth=truth, shift=shift)

    def q(self, a, w):
        w = np.asarray(w, dtype=float)
        if self.mode == "fitted":
            return predict_q(self.q_fit, a, w)
        base = self.truth.q0(np.broadcast_to(a, w.shape), w)
        if self.mode == "oracle":
            return base
        return base + self.shift.q_amplitude * self.shift.direction(w)

    def g(self, w):
        w = np.asarray(w, dtype=float)
        if self.mode == "fitted":
            return predict_g(self.g_fit, w)
        if self.mode == "oracle":
            return expit(self.truth.g0_logit(w))
        return expit(self.truth.g0_logit(w) + self.shift.g_amplitude * self.shift.direction(w))
