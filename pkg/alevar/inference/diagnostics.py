"""
Study-level checks: the Monte Carlo variance decomposition, the rho-hat regime
classifier, the 1-D Mallows-2 distance, the bootstrap consistency probe and
the C_n tracker.
"""

from __future__ import annotations

import math
from typing import Any, Callable, Iterable, List, Optional, Sequence, Tuple, Union

import bittensor as bt
import numpy as np

from alevar import constants
from alevar.core.dgp import DgpTruth
from alevar.core.errors import InputOrderError, InvalidSizeError, OracleUnavailableError
from alevar.core.models import DecompositionReport, LooPerturbations, ReplicateRecord, RegimeVerdict
from alevar.inference.resampling import take_rows, pairs_bootstrap
from alevar.utils.streams import SeedLike, make_generator

VERDICTS = ("strong-decay", "near-boundary", "inconclusive")
MIN_DECOMPOSITION_REPLICATES = 100


def _mean(values: np.ndarray) -> float:
    return math.fsum(values) / values.size


def _cov(x: np.ndarray, y: np.ndarray) -> float:
    return math.fsum((x - _mean(x)) * (y - _mean(y))) / (x.size - 1)


def _decompose(psi: np.ndarray, eif: np.ndarray, rem: np.ndarray) -> Tuple[float, float, float, float]:
    return _cov(psi, psi), _cov(eif, eif), _cov(rem, rem), 2.0 * _cov(eif, rem)


def decomposition_oracle(
    records: Iterable[ReplicateRecord],
    *,
    batches: int = constants.MC_BATCHES,
) -> DecompositionReport:
    """
    Split the Monte Carlo variance of psi_hat into the influence term, the
    remainder variance and twice their covariance. The closure gap is judged
    against a batch-means standard error of var_total.
    """
    usable = sorted((r for r in records if not r.failed), key=lambda r: r.replicate_index)
    if len(usable) < MIN_DECOMPOSITION_REPLICATES:
        raise InvalidSizeError(
            f"decomposition needs at least {MIN_DECOMPOSITION_REPLICATES} replicates, got {len(usable)}"
        )
    missing = [r.replicate_index for r in usable if r.psi_hat is None or r.mean_true_d is None or r.r_rem is None]
    if missing:
        raise OracleUnavailableError(
            f"{len(missing)} records lack oracle fields (psi_hat, mean_true_d, r_rem); first {missing[:5]}"
        )
    psi = np.array([r.psi_hat for r in usable])
    eif = np.array([r.mean_true_d for r in usable])
    rem = np.array([r.r_rem for r in usable])

    var_total, eif_term, var_rem, cross = _decompose(psi, eif, rem)
    closure_gap = var_total - (eif_term + var_rem + cross)

    per_batch = [
        _cov(chunk, chunk) for chunk in np.array_split(psi, min(batches, psi.size // 2)) if chunk.size >= 2
    ]
    spread = float(np.std(per_batch, ddof=1)) if len(per_batch) > 1 else float("nan")
    mc_se_total = spread / math.sqrt(len(per_batch))

    report = DecompositionReport(
        var_total=var_total,
        eif_term=eif_term,
        var_rem=var_rem,
        cross_term=cross,
        closure_gap=closure_gap,
        mc_se_total=mc_se_total,
        replicates=len(usable),
    )
    bt.logging.debug(
        f"decomposition | R={len(usable)} var_total={var_total:.6g} eif={eif_term:.6g} "
        f"rem={var_rem:.6g} cross={cross:.6g} gap={closure_gap:.3g} se={mc_se_total:.3g}"
    )
    return report


def regime_classify(
    rho_by_n: Sequence[Tuple[int, float]],
    threshold: float = constants.REGIME_THRESHOLD,
    *,
    min_relative_decrease: float = constants.REGIME_MIN_RELATIVE_DECREASE,
) -> RegimeVerdict:
    """
    Strong decay: the excess rho-1 at the largest n is under ``threshold`` and
    has shrunk by at least ``min_relative_decrease``. Near boundary: the
    excess stays above ``threshold`` at every n while rho itself shrinks by
    less than ``min_relative_decrease``.
    """
    pairs = tuple((int(n), float(rho)) for n, rho in rho_by_n)
    sizes = [n for n, _ in pairs]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise InputOrderError(f"sample sizes must be strictly ascending, got {sizes}")

    excess = [rho - 1.0 for _, rho in pairs]
    trend = float("nan")
    if excess and excess[0] != 0.0:
        trend = (excess[0] - excess[-1]) / excess[0]

    verdict = "inconclusive"
    if len(pairs) >= 3:
        first_rho, last_rho = pairs[0][1], pairs[-1][1]
        rho_drop = (first_rho - last_rho) / first_rho
        if excess[-1] < threshold and trend >= min_relative_decrease:
            verdict = "strong-decay"
        elif all(e > threshold for e in excess) and rho_drop < min_relative_decrease:
            verdict = "near-boundary"
    return RegimeVerdict(
        verdict=verdict,
        rho_by_n=pairs,
        trend_statistic=trend,
        threshold=float(threshold),
        min_relative_decrease=float(min_relative_decrease),
    )


def mallows2_1d(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Wasserstein-2 distance between two empirical laws on a shared quantile grid."""
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidSizeError("both samples must be nonempty")
    k = min(a.size, b.size, constants.MALLOWS_GRID_MAX)
    grid = (np.arange(k) + 0.5) / k
    diff = np.quantile(a, grid) - np.quantile(b, grid)
    return math.sqrt(math.fsum(diff * diff) / k)


def bootstrap_consistency_check(
    data: Any,
    estimate_fn: Callable[[Any], float],
    truth: DgpTruth | float,
    B: int,
    reps: int,
    seed: SeedLike = 0,
    *,
    sampler: Optional[Callable[[np.random.Generator], Any]] = None,
    psi0: Optional[float] = None,
) -> float:
    """
    d2 between B bootstrap pivots sqrt(n)(psi* - psi_hat) on ``data`` and
    ``reps`` Monte Carlo pivots sqrt(n)(psi_hat - psi0) on fresh samples drawn
    by ``sampler``. Without a sampler the Monte Carlo pivots come from
    resampling ``data`` itself, which only makes sense as a smoke check.
    """
    if int(reps) < 1:
        raise InvalidSizeError(f"reps must be at least 1, got {reps}")
    n = len(data)
    root_n = math.sqrt(n)
    if psi0 is None:
        psi0 = truth.psi0 if isinstance(truth, DgpTruth) else float(truth)
    rng = make_generator(seed)
    psi_hat = estimate_fn(data)
    boot = pairs_bootstrap(estimate_fn, data, B, rng)
    boot_pivots = root_n * (boot.replicates - psi_hat)
    if sampler is None:
        def sampler(gen: np.random.Generator) -> Any:
            return take_rows(data, gen.integers(0, n, size=n))

    mc_pivots = np.array([root_n * (estimate_fn(sampler(rng)) - psi0) for _ in range(int(reps))])
    return mallows2_1d(boot_pivots, mc_pivots)


def cn_tracker(
    records: Iterable[Union[LooPerturbations, ReplicateRecord]],
) -> List[Tuple[int, float, float, int]]:
    """Per sample size: (n, mean C_n, variance of C_n, count), ascending in n."""
    grouped = {}
    for record in records:
        if isinstance(record, ReplicateRecord):
            size, c_n = record.size, record.c_n
        else:
            size, c_n = record.n, record.c_n
        if c_n is None or not math.isfinite(c_n):
            continue
        grouped.setdefault(size, []).append(c_n)
    rows = []
    for n in sorted(grouped):
        values = np.asarray(grouped[n], dtype=float)
        mean = _mean(values)
        variance = _cov(values, values) if values.size > 1 else 0.0
        rows.append((n, mean, variance, int(values.size)))
    return rows
