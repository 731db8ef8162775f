"""alevar command line: simulate, diagnose and calibrate."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import bittensor as bt
from dotenv import load_dotenv

from alevar import __version__, constants
from alevar.core.dgp import DgpTruth, NearBoundaryConfig
from alevar.core.errors import (
    ConfigError,
    InvalidSizeError,
    OracleUnavailableError,
    ReportWriteError,
    StudyAbortedError,
)
from alevar.inference.diagnostics import cn_tracker, decomposition_oracle, mallows2_1d, regime_classify
from alevar.study.calibration import (
    c_r_monte_carlo,
    calibrate,
    load_calibration,
    sigma2_eif_monte_carlo,
    solve_lambda_g,
    write_calibration,
)
from alevar.study.config import StudyConfig, resolve_config
from alevar.study.records import persist_json_registry, persist_records, load_records
from alevar.study.report import emit_report
from alevar.study.runner import run_cells
from alevar.utils.config import (
    add_calibrate_args,
    add_common_args,
    add_diagnose_args,
    add_simulate_args,
    option,
)
from alevar.utils.runtime_info import collect_runtime_info, write_runtime_snapshot
from alevar.utils.wandb_helper import StudyWandbHelper

EXIT_OK = 0
EXIT_ABORTED = 1
EXIT_CONFIG = 2

SIMULATE_FLAGS = (
    "study",
    "sizes",
    "icc",
    "cluster_size",
    "lambda",
    "mechanism",
    "seed",
    "reps",
    "boot",
    "alpha",
    "critical",
    "methods",
    "workers",
    "out",
    "format",
    "records",
    "threshold",
    "calibration",
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    add_common_args(common)

    parser = argparse.ArgumentParser(
        prog="alevar",
        description="Variance estimation studies for asymptotically linear estimators.",
    )
    parser.add_argument("--version", action="version", version=f"alevar {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    add_simulate_args(sub.add_parser("simulate", parents=[common], help="Run a replicate study."))
    add_diagnose_args(sub.add_parser("diagnose", parents=[common], help="Diagnostics on stored records."))
    add_calibrate_args(sub.add_parser("calibrate", parents=[common], help="Compute calibration constants."))
    return parser


def configure_logging(args: Any) -> None:
    logging_dir = os.path.expanduser(str(option(args, "logging.logging_dir", "./logs")))
    record_log = bool(option(args, "logging.record_log", False))
    if record_log:
        os.makedirs(logging_dir, exist_ok=True)
    bt.logging(
        debug=bool(option(args, "logging.debug", False)),
        trace=bool(option(args, "logging.trace", False)),
        logging_dir=logging_dir,
        record_log=record_log,
    )


def _split_numbers(text: Optional[str], cast) -> List[Any]:
    if not text:
        return []
    try:
        return [cast(part.strip()) for part in str(text).split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}: {exc}") from exc


def _default_output(config: StudyConfig) -> Path:
    suffix = "csv" if config.output_format == "csv" else "md"
    return Path(f"{config.study_kind}.{suffix}")


def cmd_simulate(args: Any) -> int:
    flags = {name: getattr(args, name, None) for name in SIMULATE_FLAGS}
    config = resolve_config(flags, config_path=getattr(args, "config", None))
    calibration = load_calibration(config.calibration_path)
    runtime = collect_runtime_info()
    telemetry = StudyWandbHelper(args=args, study_kind=config.study_kind, runtime_info=runtime)
    telemetry.log_study_start(config.echo())
    try:
        try:
            report, cells = run_cells(config, telemetry=telemetry)
        except StudyAbortedError as exc:
            bt.logging.error(f"study aborted | {exc} | summary={json.dumps(exc.summary, sort_keys=True)}")
            telemetry.log_error("study-aborted", str(exc))
            return EXIT_ABORTED

        report.metadata["build_id"] = runtime["build_id"]
        if calibration is not None:
            report.metadata["calibration"] = {
                "c_r": calibration.c_r,
                "sigma2_eif": calibration.sigma2_eif,
                "c_r_ratio": calibration.c_r_ratio,
            }
        out = config.output_path or _default_output(config)
        written = emit_report(report, config.output_format, out)
        records_path = config.records_path or written.with_suffix(".records.json")
        persist_records(records_path, cells, config=config.echo(), metadata=report.metadata)
        try:
            write_runtime_snapshot(written.with_suffix(".runtime.json"), {**runtime, "status": "finished"})
        except OSError as exc:
            bt.logging.warning(f"runtime snapshot not written | error={exc}")
        telemetry.log_report(report.metadata)
        bt.logging.info(f"report written | path={written} records={records_path}")
        return EXIT_OK
    finally:
        telemetry.finish()


def _cell_rho(records) -> float:
    ok = [r for r in records if not r.failed and r.variance_report is not None]
    sand = math.fsum(r.variance_report.var_sand for r in ok)
    jk = math.fsum(r.variance_report.var_jk for r in ok)
    return jk / sand if sand > 0 else float("nan")


def run_diagnostics(
    config_echo: Dict[str, Any],
    cells: Dict[Any, list],
    *,
    check: str = "all",
    threshold: Optional[float] = None,
    calibration=None,
) -> Dict[str, Any]:
    threshold = threshold if threshold is not None else config_echo.get("regime_threshold", constants.REGIME_THRESHOLD)
    results: Dict[str, Any] = {"study_kind": config_echo.get("study_kind")}

    if check in ("all", "regime"):
        regimes = {}
        for icc in sorted({icc for _, icc in cells}):
            rho_by_n = [(size, _cell_rho(cells[(size, i)])) for size, i in sorted(cells) if i == icc]
            regimes[f"{icc:g}"] = regime_classify(rho_by_n, threshold).to_payload()
        results["regime"] = regimes

    if check in ("all", "decomposition"):
        decompositions = {}
        for (size, icc), records in sorted(cells.items()):
            key = f"{size}/{icc:g}"
            try:
                payload = decomposition_oracle(records).to_payload()
            except (InvalidSizeError, OracleUnavailableError) as exc:
                decompositions[key] = {"error": exc.code, "message": str(exc)}
                continue
            payload["scaled_var_rem"] = size * payload["var_rem"]
            if calibration is not None:
                payload["c_r_reference"] = calibration.c_r_at.get(size, calibration.c_r)
            decompositions[key] = payload
        results["decomposition"] = decompositions

    if check in ("all", "cn"):
        rows = cn_tracker(record for records in cells.values() for record in records)
        results["cn"] = [
            {"n": n, "mean": mean, "variance": variance, "count": count} for n, mean, variance, count in rows
        ]
        if calibration is not None:
            for row in results["cn"]:
                row["c_r_reference"] = calibration.c_r_at.get(row["n"], calibration.c_r)

    if check in ("all", "bootstrap-consistency"):
        distances = {}
        for (size, icc), records in sorted(cells.items()):
            ok = [r for r in records if not r.failed]
            pivot_sets = [r.boot_pivots for r in ok if r.boot_pivots]
            if not pivot_sets:
                continue
            psi0 = DgpTruth().psi0
            mc_pivots = [math.sqrt(size) * (r.psi_hat - psi0) for r in ok]
            values = [mallows2_1d(p, mc_pivots) for p in pivot_sets]
            distances[f"{size}/{icc:g}"] = math.fsum(values) / len(values)
        results["bootstrap_consistency"] = distances
    return results


def cmd_diagnose(args: Any) -> int:
    config_echo, cells = load_records(args.records)
    if not cells:
        raise ConfigError(f"no replicate records found in {args.records}")
    calibration = load_calibration(getattr(args, "calibration", None))
    results = run_diagnostics(config_echo, cells, check=args.check, threshold=args.threshold, calibration=calibration)
    if args.out:
        persist_json_registry(args.out, results)
    sys.stdout.write(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_calibrate(args: Any) -> int:
    sizes = _split_numbers(args.sizes, int)
    iccs = _split_numbers(args.icc, float) or [0.0]
    if len(iccs) > 1:
        raise ConfigError("calibrate takes a single --icc value per calibration file")
    icc = iccs[0]
    if icc > 0.0 or args.cluster_size:
        truth = DgpTruth.from_icc(icc, args.cluster_size or constants.CLUSTER_SIZE)
    else:
        truth = DgpTruth()

    lambdas = args.__dict__.get("lambda") or []
    if len(lambdas) > 2:
        raise ConfigError("--lambda takes one or two values")
    lambda_q = lambdas[0] if lambdas else constants.LAMBDA_Q
    lambda_g = lambdas[-1] if lambdas else constants.LAMBDA_G
    mechanism = args.mechanism or constants.NEAR_BOUNDARY_MECHANISM
    if args.target_ratio is not None:
        try:
            lambda_g = solve_lambda_g(args.target_ratio, truth, lambda_q=lambda_q, mechanism=mechanism)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        bt.logging.info(f"solved lambda_g | target_ratio={args.target_ratio} lambda_g={lambda_g:.8g}")
    try:
        near = NearBoundaryConfig(lambda_q=lambda_q, lambda_g=lambda_g, mechanism=mechanism)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    result = calibrate(truth, near, sizes)
    if args.mc_reps > 0:
        seed = args.seed if args.seed is not None else constants.BASE_SEED
        sigma_mc = sigma2_eif_monte_carlo(truth, seed=seed)
        bt.logging.info(f"sigma2_eif check | quadrature={result.sigma2_eif:.6g} monte_carlo={sigma_mc:.6g}")
        for size in sizes:
            estimate = c_r_monte_carlo(size, truth, near, reps=args.mc_reps, base_seed=seed)
            bt.logging.info(
                f"c_r check | size={size} quadrature={result.c_r_at.get(size, result.c_r):.6g} monte_carlo={estimate:.6g}"
            )
    out = args.out or os.getenv("ALEVAR_CALIBRATION_PATH") or "calibration.txt"
    written = write_calibration(out, result)
    bt.logging.info(f"calibration written | path={written} c_r_ratio={result.c_r_ratio:.6g}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "diagnose": cmd_diagnose, "calibrate": cmd_calibrate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    configure_logging(args)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ReportWriteError) as exc:
        bt.logging.error(f"{args.command} failed | code={exc.code} error={exc}")
        sys.stderr.write(f"alevar: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
