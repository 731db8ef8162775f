"""Study reports: per-cell rows, CSV with a fixed column set, and markdown tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import pandas as pd

from alevar import constants
from alevar.core.errors import ReportWriteError

FLOAT_FORMAT = f"%.{constants.REPORT_SIGNIFICANT_DIGITS}g"

# Extra per-cell metrics shown in the markdown table after the CSV columns.
MARKDOWN_EXTRAS = (
    ("rmse", "RMSE"),
    ("cp_boot_percentile", "CP(Pct)"),
    ("width_jk", "Width(JK)"),
    ("power_jk", "Power(JK)"),
    ("mean_gap", "JK-Sand"),
)


@dataclass(frozen=True)
class ReportRow:
    size: int
    icc: float
    bias: float
    mcsd: float
    cp_sand: float
    cp_jk: float
    cp_boot: float
    cp_bca: float
    cp_hc: float
    rho_hat: float
    n_failures: int
    extras: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("cp_sand", "cp_jk", "cp_boot", "cp_bca", "cp_hc"):
            value = getattr(self, name)
            if not math.isnan(value) and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def csv_values(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in constants.CSV_COLUMNS}

    def to_payload(self) -> Dict[str, Any]:
        payload = self.csv_values()
        payload["extras"] = dict(self.extras)
        return payload


@dataclass
class StudyReport:
    rows: List[ReportRow] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def rho_by_size(self, icc: float = 0.0) -> List[tuple]:
        return [(row.size, row.rho_hat) for row in self.rows if row.icc == icc]

    def row(self, size: int, icc: float = 0.0) -> ReportRow:
        for row in self.rows:
            if row.size == size and row.icc == icc:
                return row
        raise KeyError((size, icc))


def report_frame(report: StudyReport) -> pd.DataFrame:
    frame = pd.DataFrame([row.csv_values() for row in report.rows], columns=list(constants.CSV_COLUMNS))
    if not frame.empty:
        frame = frame.astype({"size": "int64", "n_failures": "int64"})
    return frame


def read_report_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, encoding="utf-8")


def _format_cell(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return "n/a"
    return format(value, f".{constants.REPORT_SIGNIFICANT_DIGITS}g")


def render_markdown(report: StudyReport) -> str:
    meta = report.metadata
    clustered = bool(meta.get("clustered"))
    size_head = "J" if clustered else "n"
    heads: List[str] = [size_head]
    if clustered:
        heads.append("ICC")
    heads += ["Bias", "MCSD", "CP(Sand)", "CP(JK)", "CP(Boot)", "CP(BCa)", "CP(HC)", "ρ̂", "Failures"]
    heads += [label for _, label in MARKDOWN_EXTRAS]

    lines = [f"# {meta.get('study_kind', 'study')}", ""]
    for key in ("build_id", "base_seed", "reps", "boot_b", "level", "critical"):
        if key in meta:
            lines.append(f"- {key}: {meta[key]}")
    verdict = meta.get("regime")
    if isinstance(verdict, Mapping):
        lines.append(
            f"- regime: {verdict.get('verdict')} (threshold {verdict.get('threshold')}, "
            f"min relative decrease {verdict.get('min_relative_decrease')})"
        )
    lines.append("")
    lines.append("| " + " | ".join(heads) + " |")
    lines.append("|" + "|".join("---:" for _ in heads) + "|")
    for row in report.rows:
        cells: List[str] = [str(row.size)]
        if clustered:
            cells.append(_format_cell(row.icc))
        cells += [
            _format_cell(v)
            for v in (row.bias, row.mcsd, row.cp_sand, row.cp_jk, row.cp_boot, row.cp_bca, row.cp_hc, row.rho_hat)
        ]
        cells.append(str(row.n_failures))
        cells += [_format_cell(row.extras.get(key)) for key, _ in MARKDOWN_EXTRAS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _atomic_write(path: Path, writer) -> None:
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        writer(tmp_path)
        tmp_path.replace(path)
    except OSError as exc:
        raise ReportWriteError(f"cannot write report to {path}: {exc}") from exc


def emit_report(report: StudyReport, fmt: str = "csv", path: Optional[str | Path] = None) -> Path:
    """Write ``report`` as CSV or markdown; reals carry six significant digits."""
    fmt = fmt.lower()
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}")
    target = Path(path) if path is not None else Path(f"alevar-report.{'csv' if fmt == 'csv' else 'md'}")

    if fmt == "csv":
        frame = report_frame(report)

        def writer(tmp: Path) -> None:
            frame.to_csv(
                tmp,
                index=False,
                float_format=FLOAT_FORMAT,
                lineterminator="\n",
                na_rep="",
                encoding="utf-8",
            )

    else:
        text = render_markdown(report)

        def writer(tmp: Path) -> None:
            with tmp.open("w", encoding="utf-8", newline="\n") as handle:
                handle.write(text)

    _atomic_write(target, writer)
    return target


def rows_from_frame(frame: pd.DataFrame) -> Sequence[ReportRow]:
    rows = []
    for record in frame.to_dict(orient="records"):
        values = {k: (float("nan") if pd.isna(v) else v) for k, v in record.items()}
        rows.append(
            ReportRow(
                size=int(values["size"]),
                icc=float(values["icc"]),
                bias=float(values["bias"]),
                mcsd=float(values["mcsd"]),
                cp_sand=float(values["cp_sand"]),
                cp_jk=float(values["cp_jk"]),
                cp_boot=float(values["cp_boot"]),
                cp_bca=float(values["cp_bca"]),
                cp_hc=float(values["cp_hc"]),
                rho_hat=float(values["rho_hat"]),
                n_failures=int(values["n_failures"]),
            )
        )
    return rows
