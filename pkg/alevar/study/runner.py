"""
Monte Carlo study harness: fan replicates out over a process pool, then
aggregate each (size, icc) cell into a report row in replicate order.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import bittensor as bt
import numpy as np

from alevar import constants
from alevar.core.dgp import DgpTruth, NearBoundaryConfig, gen_aipw_iid, gen_clustered
from alevar.core.errors import RECOVERABLE_ERRORS, StudyAbortedError, failure_code
from alevar.core.estimator import EstimatorPipeline, perturbations_from_loo, remainder_oracle
from alevar.core.models import Dataset, ReplicateRecord
from alevar.inference.diagnostics import decomposition_oracle, mallows2_1d, regime_classify
from alevar.inference.resampling import variance_suite
from alevar.study.config import StudyConfig
from alevar.study.report import ReportRow, StudyReport
from alevar.utils.streams import replicate_generator, replicate_sequence

CSV_METHOD_COLUMNS = {
    "cp_sand": "sand-wald",
    "cp_jk": "jk-wald",
    "cp_boot": "boot-wald",
    "cp_bca": "bca",
    "cp_hc": "hc-wald",
}
METHOD_SLUGS = {
    "sand-wald": "sand",
    "jk-wald": "jk",
    "hc-wald": "hc",
    "boot-wald": "boot",
    "boot-percentile": "boot_percentile",
    "bca": "bca",
}

CellKey = Tuple[int, float]


@dataclass(frozen=True)
class ReplicateTask:
    config: StudyConfig
    cell_index: int
    size: int
    icc: float
    replicate: int


def cell_truth(config: StudyConfig, icc: float) -> DgpTruth:
    if config.clustered:
        return DgpTruth.from_icc(icc, config.cluster_size)
    return DgpTruth()


def cell_pipeline(config: StudyConfig, truth: DgpTruth) -> EstimatorPipeline:
    kind = config.study_kind
    if kind == "oracle":
        return EstimatorPipeline(mode="oracle", truth=truth)
    if kind in ("near-boundary", "clustered-icc-sweep"):
        near = NearBoundaryConfig(lambda_q=config.lambda_q, lambda_g=config.lambda_g, mechanism=config.mechanism)
        return EstimatorPipeline(mode="near-boundary", truth=truth, near_boundary=near)
    return EstimatorPipeline(mode="fitted", truth=truth)


def generate(config: StudyConfig, truth: DgpTruth, size: int, rng: np.random.Generator) -> Dataset:
    if config.clustered:
        return gen_clustered(size, truth, rng)
    return gen_aipw_iid(size, truth, rng)


def run_replicate(task: ReplicateTask) -> ReplicateRecord:
    """One replicate: data, estimate, variance suite, intervals and oracle fields."""
    config = task.config
    truth = cell_truth(config, task.icc)
    pipeline = cell_pipeline(config, truth)
    data = generate(config, truth, task.size, replicate_generator(config.base_seed, task.cell_index, task.replicate))
    boot_b = config.boot_b
    try:
        suite = variance_suite(
            data,
            pipeline,
            methods=config.methods,
            level=config.level,
            critical=config.critical_for(task.size),
            boot_b=boot_b,
            seed=replicate_sequence(config.base_seed, task.cell_index, task.replicate, "bootstrap"),
        )
    except RECOVERABLE_ERRORS as exc:
        code = failure_code(exc)
        bt.logging.warning(
            f"replicate failed | size={task.size} icc={task.icc} replicate={task.replicate} code={code} error={exc}"
        )
        return ReplicateRecord(replicate_index=task.replicate, size=task.size, icc=task.icc, failure=code)

    psi0 = truth.psi0
    estimate = suite.estimate
    oracle = remainder_oracle(estimate, data, truth)
    c_n = None
    if not config.clustered:
        c_n = perturbations_from_loo(estimate.psi_hat, suite.loo_estimates, oracle.true_scores, psi0).c_n
    pivots = None
    replicates = suite.report.boot_replicates
    if config.study_kind == "bootstrap-consistency" and replicates is not None:
        pivots = (math.sqrt(task.size) * (replicates - estimate.psi_hat)).tolist()

    return ReplicateRecord(
        replicate_index=task.replicate,
        size=task.size,
        icc=task.icc,
        psi_hat=estimate.psi_hat,
        variance_report=suite.report,
        ci_contains={m: ci.contains(psi0) for m, ci in suite.intervals.items()},
        ci_width={m: ci.width for m, ci in suite.intervals.items()},
        ci_rejects_null={m: ci.excludes(0.0) for m, ci in suite.intervals.items()},
        mean_true_d=oracle.mean_true_d,
        r_rem=oracle.r_rem,
        c_n=c_n,
        boot_pivots=pivots,
        method_failures=dict(suite.method_failures),
    )


def _fmean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if len(values) else float("nan")


def _fvar(values: Sequence[float]) -> float:
    if len(values) < 2:
        return float("nan")
    centre = _fmean(values)
    return math.fsum((v - centre) ** 2 for v in values) / (len(values) - 1)


def coverage(records: Sequence[ReplicateRecord], method: str) -> float:
    """#contains / (reps - replicates where ``method`` failed or was not produced)."""
    flags = [r.ci_contains[method] for r in records if not r.failed and method in r.ci_contains]
    if not flags:
        return float("nan")
    return sum(1 for flag in flags if flag) / len(flags)


def failure_summary(records: Sequence[ReplicateRecord]) -> Dict[str, int]:
    summary: Dict[str, int] = {}
    for record in records:
        if record.failed:
            summary[record.failure] = summary.get(record.failure, 0) + 1
    return dict(sorted(summary.items()))


def summarize_cell(
    records: Sequence[ReplicateRecord],
    *,
    size: int,
    icc: float,
    psi0: float,
    methods: Sequence[str],
    reps: Optional[int] = None,
    max_failure_fraction: float = constants.MAX_FAILURE_FRACTION,
) -> ReportRow:
    """Aggregate one cell; raises StudyAbortedError when too many replicates failed."""
    ordered = sorted(records, key=lambda r: r.replicate_index)
    reps = len(ordered) if reps is None else int(reps)
    failed = [r for r in ordered if r.failed]
    if reps and len(failed) / reps > max_failure_fraction:
        summary = {"size": size, "icc": icc, "reps": reps, "failures": failure_summary(ordered)}
        raise StudyAbortedError(
            f"cell size={size} icc={icc}: {len(failed)}/{reps} replicates failed "
            f"(limit {max_failure_fraction:.0%}); codes {summary['failures']}",
            summary=summary,
        )
    ok = [r for r in ordered if not r.failed]
    psi = [r.psi_hat for r in ok]
    errors = [p - psi0 for p in psi]
    var_sand = [r.variance_report.var_sand for r in ok]
    var_jk = [r.variance_report.var_jk for r in ok]
    rho_hat = math.fsum(var_jk) / math.fsum(var_sand) if ok and math.fsum(var_sand) > 0 else float("nan")

    extras: Dict[str, float] = {
        "rmse": math.sqrt(_fmean([e * e for e in errors])) if errors else float("nan"),
        "mean_gap": _fmean([jk - sand for jk, sand in zip(var_jk, var_sand)]),
        "mean_rho": _fmean([r.variance_report.rho_hat for r in ok]),
    }
    boot = [r.variance_report.var_boot for r in ok if r.variance_report.var_boot is not None]
    if boot:
        extras["mean_var_boot"] = _fmean(boot)
    for method in methods:
        slug = METHOD_SLUGS[method]
        if slug == "boot_percentile":
            extras["cp_boot_percentile"] = coverage(ordered, method)
        widths = [r.ci_width[method] for r in ok if method in r.ci_width]
        rejects = [r.ci_rejects_null[method] for r in ok if method in r.ci_rejects_null]
        extras[f"width_{slug}"] = _fmean(widths)
        extras[f"power_{slug}"] = _fmean([1.0 if x else 0.0 for x in rejects])
        extras[f"failures_{slug}"] = float(sum(1 for r in ordered if r.failed or method in r.method_failures))

    remainders = [r.r_rem for r in ok if r.r_rem is not None]
    if len(remainders) > 1:
        extras["scaled_var_rem"] = size * _fvar(remainders)
    c_values = [r.c_n for r in ok if r.c_n is not None and math.isfinite(r.c_n)]
    if c_values:
        extras["mean_c_n"] = _fmean(c_values)
        extras["var_c_n"] = _fvar(c_values)
    if len(ok) >= 100:
        decomposition = decomposition_oracle(ok)
        extras["closure_gap"] = decomposition.closure_gap
        extras["closure_se"] = decomposition.mc_se_total
    pivot_sets = [r.boot_pivots for r in ok if r.boot_pivots]
    if pivot_sets:
        mc_pivots = [math.sqrt(size) * e for e in errors]
        extras["d2"] = _fmean([mallows2_1d(pivots, mc_pivots) for pivots in pivot_sets])

    def cp(column: str) -> float:
        method = CSV_METHOD_COLUMNS[column]
        return coverage(ordered, method) if method in methods else float("nan")

    return ReportRow(
        size=int(size),
        icc=float(icc),
        bias=_fmean(errors),
        mcsd=math.sqrt(_fvar(psi)) if len(psi) > 1 else float("nan"),
        cp_sand=cp("cp_sand"),
        cp_jk=cp("cp_jk"),
        cp_boot=cp("cp_boot"),
        cp_bca=cp("cp_bca"),
        cp_hc=cp("cp_hc"),
        rho_hat=rho_hat,
        n_failures=len(failed),
        extras=extras,
    )


def _run_tasks(tasks: List[ReplicateTask], workers: int) -> List[ReplicateRecord]:
    if workers <= 1 or len(tasks) <= 1:
        return [run_replicate(task) for task in tasks]
    chunksize = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_replicate, tasks, chunksize=chunksize))


def run_cells(config: StudyConfig, *, telemetry: Any = None) -> Tuple[StudyReport, Dict[CellKey, List[ReplicateRecord]]]:
    """Run every cell; return the report and the raw records keyed by (size, icc)."""
    started = time.time()
    rows: List[ReportRow] = []
    cells: Dict[CellKey, List[ReplicateRecord]] = {}
    grid = [(size, icc) for icc in config.icc_values for size in config.sizes]
    bt.logging.info(
        f"study start | kind={config.study_kind} cells={len(grid)} reps={config.reps} "
        f"boot={config.boot_b} seed={config.base_seed} workers={config.worker_count}"
    )
    for cell_index, (size, icc) in enumerate(grid):
        cell_started = time.time()
        tasks = [ReplicateTask(config, cell_index, size, icc, r) for r in range(config.reps)]
        records = sorted(_run_tasks(tasks, config.worker_count), key=lambda r: r.replicate_index)
        cells[(size, icc)] = records
        truth = cell_truth(config, icc)
        row = summarize_cell(records, size=size, icc=icc, psi0=truth.psi0, methods=config.methods, reps=config.reps)
        rows.append(row)
        bt.logging.info(
            f"cell done | size={size} icc={icc} bias={row.bias:.4g} mcsd={row.mcsd:.4g} "
            f"cp_sand={row.cp_sand:.3f} cp_jk={row.cp_jk:.3f} rho={row.rho_hat:.4f} "
            f"failures={row.n_failures} seconds={time.time() - cell_started:.1f}"
        )
        if telemetry is not None:
            telemetry.log_cell(row)

    rows.sort(key=lambda r: (r.icc, r.size))
    metadata: Dict[str, Any] = {
        "study_kind": config.study_kind,
        "clustered": config.clustered,
        "base_seed": config.base_seed,
        "reps": config.reps,
        "boot_b": config.boot_b,
        "level": config.level,
        "critical": config.critical,
        "config": config.echo(),
        "wall_time_seconds": round(time.time() - started, 3),
    }
    if not config.clustered and len(config.sizes) >= 3:
        metadata["regime"] = regime_classify(
            [(row.size, row.rho_hat) for row in rows], config.regime_threshold
        ).to_payload()
    return StudyReport(rows=rows, metadata=metadata), cells


def run_study(config: StudyConfig, *, telemetry: Any = None) -> StudyReport:
    report, _ = run_cells(config, telemetry=telemetry)
    return report
