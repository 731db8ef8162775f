"""Command-line argument groups for the alevar subcommands."""

from __future__ import annotations

import argparse
from typing import Any

import bittensor as bt

from alevar.core.dgp import MECHANISMS
from alevar.inference.resampling import CI_METHODS
from alevar.study.config import REPORT_FORMATS, STUDY_KINDS


def add_common_args(parser: argparse.ArgumentParser) -> None:
    bt.logging.add_args(parser)
    parser.add_argument(
        "--wandb.on",
        action="store_true",
        default=False,
        help="Enable Weights & Biases telemetry for this run.",
    )
    parser.add_argument(
        "--wandb.off",
        action="store_true",
        default=False,
        help="Disable Weights & Biases telemetry even if ALEVAR_WANDB_ENABLED is set.",
    )
    parser.add_argument(
        "--wandb.offline",
        action="store_true",
        default=False,
        help="Run Weights & Biases in offline mode.",
    )
    parser.add_argument(
        "--wandb.project_name",
        type=str,
        default="alevar-studies",
        help="Weights & Biases project name.",
    )
    parser.add_argument(
        "--wandb.entity",
        type=str,
        default="",
        help="Weights & Biases entity/team name.",
    )


def add_grid_args(parser: argparse.ArgumentParser) -> None:
    """Flags shared by simulate and calibrate; defaults are None so lower layers show through."""
    parser.add_argument("--sizes", type=str, default=None, help="Comma-separated n (or J for clustered studies).")
    parser.add_argument("--icc", type=str, default=None, help="Comma-separated intra-cluster correlations.")
    parser.add_argument("--cluster-size", dest="cluster_size", type=int, default=None, help="Cluster size m.")
    parser.add_argument(
        "--lambda",
        dest="lambda",
        type=float,
        nargs="+",
        default=None,
        metavar="LAMBDA",
        help="Near-boundary scales: one value for both, or lambda_q lambda_g.",
    )
    parser.add_argument("--mechanism", choices=MECHANISMS, default=None, help="Near-boundary injection mechanism.")
    parser.add_argument("--seed", type=int, default=None, help="Base seed for every random stream.")


def add_simulate_args(parser: argparse.ArgumentParser) -> None:
    add_grid_args(parser)
    parser.add_argument("--study", choices=STUDY_KINDS, default=None, help="Study kind.")
    parser.add_argument("--reps", type=int, default=None, help="Replicates per cell.")
    parser.add_argument("--boot", type=int, default=None, help="Bootstrap replicates B (0 disables).")
    parser.add_argument("--alpha", type=float, default=None, help="1 - confidence level.")
    parser.add_argument("--critical", type=str, default=None, help="z, t, t(df) or auto.")
    parser.add_argument(
        "--methods",
        type=str,
        default=None,
        help=f"Comma-separated interval methods from {', '.join(CI_METHODS)}.",
    )
    parser.add_argument("--workers", type=int, default=None, help="Worker processes.")
    parser.add_argument("--out", type=str, default=None, help="Report path.")
    parser.add_argument("--format", choices=REPORT_FORMATS + ("md",), default=None, help="Report format.")
    parser.add_argument("--records", type=str, default=None, help="Replicate-record JSON path.")
    parser.add_argument("--threshold", type=float, default=None, help="Regime classifier threshold on rho-1.")
    parser.add_argument("--config", type=str, default=None, help="key=value study config file.")
    parser.add_argument("--calibration", type=str, default=None, help="Calibration file to echo into the report.")


def add_diagnose_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--records", type=str, required=True, help="Replicate-record JSON written by simulate.")
    parser.add_argument(
        "--check",
        choices=("all", "regime", "decomposition", "cn", "bootstrap-consistency"),
        default="all",
        help="Which diagnostic to run.",
    )
    parser.add_argument("--threshold", type=float, default=None, help="Regime classifier threshold on rho-1.")
    parser.add_argument("--calibration", type=str, default=None, help="Calibration file for c_R comparisons.")
    parser.add_argument("--out", type=str, default=None, help="Optional JSON summary path.")


def add_calibrate_args(parser: argparse.ArgumentParser) -> None:
    add_grid_args(parser)
    parser.add_argument("--out", type=str, default=None, help="Calibration file to write.")
    parser.add_argument(
        "--target-ratio",
        dest="target_ratio",
        type=float,
        default=None,
        help="Solve lambda_g so that c_R / sigma2_EIF hits this ratio.",
    )
    parser.add_argument(
        "--mc-reps",
        dest="mc_reps",
        type=int,
        default=0,
        help="Monte Carlo replicates for the c_R cross-check (0 skips it).",
    )


def option(args: Any, name: str, default: Any = None) -> Any:
    """Read a dotted option such as ``logging.debug`` from an argparse namespace."""
    value = getattr(args, name, None)
    return default if value is None else value
