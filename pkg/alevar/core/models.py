"""
Core data models shared by the estimators, resampling layer and study harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from alevar.core.errors import InvalidSizeError


@dataclass(frozen=True)
class Observation:
    """One unit's (W, A, Y) triple."""

    w: float
    a: int
    y: float

    def __post_init__(self) -> None:
        if self.a not in (0, 1):
            raise ValueError(f"treatment must be 0 or 1, got {self.a!r}")
        if not (math.isfinite(self.w) and math.isfinite(self.y)):
            raise ValueError("covariate and outcome must be finite")


@dataclass(frozen=True)
class ClusterObservation:
    cluster_id: int
    member_index: int
    obs: Observation


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Column-oriented sample. ``cluster_id`` is optional for i.i.d. data; when it is
    present clusters are labelled 0..J-1.
    """

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    cluster_id: Optional[np.ndarray] = None
    member_index: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        a = np.asarray(self.a, dtype=np.int64)
        y = np.asarray(self.y, dtype=float)
        if not (w.ndim == a.ndim == y.ndim == 1) or not (w.size == a.size == y.size):
            raise ValueError("w, a and y must be 1-D arrays of equal length")
        if a.size and not np.all((a == 0) | (a == 1)):
            raise ValueError("treatment column must be binary")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        if self.cluster_id is not None:
            cid = np.asarray(self.cluster_id, dtype=np.int64)
            if cid.shape != w.shape or (cid.size and cid.min() < 0):
                raise ValueError("cluster_id must be non-negative and aligned with the rows")
            object.__setattr__(self, "cluster_id", cid)
            if self.member_index is None:
                object.__setattr__(self, "member_index", _member_positions(cid))
            else:
                object.__setattr__(self, "member_index", np.asarray(self.member_index, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.w.size)

    @property
    def n(self) -> int:
        return int(self.w.size)

    @property
    def is_clustered(self) -> bool:
        return self.cluster_id is not None

    @property
    def n_clusters(self) -> int:
        if self.cluster_id is None:
            return self.n
        return int(np.unique(self.cluster_id).size)

    @property
    def sampling_units(self) -> int:
        """Number of independent units: clusters for clustered data, rows otherwise."""
        return self.n_clusters

    def cluster_sizes(self) -> np.ndarray:
        if self.cluster_id is None:
            return np.ones(self.n, dtype=np.int64)
        return np.bincount(self.cluster_id)

    def rows(self) -> Iterator[Observation]:
        for w, a, y in zip(self.w, self.a, self.y):
            yield Observation(w=float(w), a=int(a), y=float(y))

    def cluster_rows(self) -> Iterator[ClusterObservation]:
        if self.cluster_id is None:
            for i, obs in enumerate(self.rows()):
                yield ClusterObservation(cluster_id=i, member_index=0, obs=obs)
            return
        for obs, cid, pos in zip(self.rows(), self.cluster_id, self.member_index):
            yield ClusterObservation(cluster_id=int(cid), member_index=int(pos), obs=obs)

    def take(self, indices: Sequence[int]) -> "Dataset":
        """Rows at ``indices`` (repeats allowed); cluster labels are kept as-is."""
        idx = np.asarray(indices, dtype=np.int64)
        cid = None if self.cluster_id is None else self.cluster_id[idx]
        pos = None if self.member_index is None else self.member_index[idx]
        return type(self)(w=self.w[idx], a=self.a[idx], y=self.y[idx], cluster_id=cid, member_index=pos)

    def with_outcomes(self, y: np.ndarray) -> "Dataset":
        return type(self)(w=self.w, a=self.a, y=y, cluster_id=self.cluster_id, member_index=self.member_index)

    def drop_index(self, i: int) -> "Dataset":
        if not -self.n <= i < self.n:
            raise IndexError(f"row index {i} out of range for n={self.n}")
        keep = np.ones(self.n, dtype=bool)
        keep[i] = False
        return self.take(np.flatnonzero(keep))

    def drop_cluster(self, j: int) -> "Dataset":
        if self.cluster_id is None:
            return self.drop_index(j)
        if not np.any(self.cluster_id == j):
            raise IndexError(f"cluster {j} not present")
        kept = self.take(np.flatnonzero(self.cluster_id != j))
        return kept.relabel_clusters()

    def take_clusters(self, cluster_draws: Sequence[int]) -> "Dataset":
        """Stack whole clusters in draw order; each draw gets a fresh cluster id."""
        if self.cluster_id is None:
            return self.take(cluster_draws).relabel_clusters(singletons=True)
        members = _cluster_members(self.cluster_id)
        parts = [members[int(j)] for j in cluster_draws]
        idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        fresh = np.concatenate(
            [np.full(part.size, new_id, dtype=np.int64) for new_id, part in enumerate(parts)]
        ) if parts else np.zeros(0, dtype=np.int64)
        return type(self)(
            w=self.w[idx],
            a=self.a[idx],
            y=self.y[idx],
            cluster_id=fresh,
            member_index=self.member_index[idx],
        )

    def relabel_clusters(self, *, singletons: bool = False) -> "Dataset":
        if singletons or self.cluster_id is None:
            cid = np.arange(self.n, dtype=np.int64)
            return type(self)(w=self.w, a=self.a, y=self.y, cluster_id=cid, member_index=np.zeros(self.n, dtype=np.int64))
        _, dense = np.unique(self.cluster_id, return_inverse=True)
        return type(self)(w=self.w, a=self.a, y=self.y, cluster_id=dense.astype(np.int64), member_index=self.member_index)


class ClusteredDataset(Dataset):
    """A Dataset whose rows always carry a cluster id."""

    def __post_init__(self) -> None:
        if self.cluster_id is None:
            raise ValueError("ClusteredDataset requires cluster_id")
        super().__post_init__()


def _member_positions(cluster_id: np.ndarray) -> np.ndarray:
    positions = np.zeros(cluster_id.size, dtype=np.int64)
    seen: Dict[int, int] = {}
    for row, cid in enumerate(cluster_id.tolist()):
        positions[row] = seen.get(cid, 0)
        seen[cid] = positions[row] + 1
    return positions


def _cluster_members(cluster_id: np.ndarray) -> List[np.ndarray]:
    order = np.argsort(cluster_id, kind="stable")
    counts = np.bincount(cluster_id)
    return np.split(order, np.cumsum(counts)[:-1])


@dataclass(frozen=True, eq=False)
class EstimateResult:
    """Point estimate plus per-unit estimated influence scores (mean-centred)."""

    psi_hat: float
    scores: np.ndarray
    cluster_scores: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.scores.size)


@dataclass(frozen=True, eq=False)
class RemainderOracle:
    r_rem: float
    mean_true_d: float
    true_scores: np.ndarray


@dataclass(frozen=True, eq=False)
class LooPerturbations:
    """Leave-one-out residuals delta_i, remainder perturbations b_i and C_n."""

    deltas: np.ndarray
    b_values: np.ndarray
    c_n: float
    failures: Dict[int, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.deltas.size)

    def to_payload(self) -> Dict[str, object]:
        return {"n": self.n, "c_n": self.c_n, "failures": {str(k): v for k, v in self.failures.items()}}


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    method: str
    critical: str
    notes: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.lower > self.upper:
            raise ValueError(f"interval lower {self.lower} exceeds upper {self.upper}")

    def contains(self, psi: float) -> bool:
        return self.lower <= psi <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def excludes(self, psi: float) -> bool:
        return not self.contains(psi)


@dataclass(frozen=True, eq=False)
class VarianceReport:
    var_sand: float
    var_jk: float
    var_hc: float
    rho_hat: float
    var_boot: Optional[float] = None
    boot_replicates: Optional[np.ndarray] = None
    boot_retries: int = 0

    def __post_init__(self) -> None:
        for name in ("var_sand", "var_jk", "var_hc"):
            if getattr(self, name) < 0:
                raise InvalidSizeError(f"{name} must be non-negative")
        if self.var_boot is not None and self.var_boot < 0:
            raise InvalidSizeError("var_boot must be non-negative")

    def to_payload(self) -> Dict[str, object]:
        return {
            "var_sand": self.var_sand,
            "var_jk": self.var_jk,
            "var_hc": self.var_hc,
            "rho_hat": self.rho_hat,
            "var_boot": self.var_boot,
            "boot_retries": self.boot_retries,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "VarianceReport":
        var_boot = payload.get("var_boot")
        return cls(
            var_sand=float(payload["var_sand"]),
            var_jk=float(payload["var_jk"]),
            var_hc=float(payload["var_hc"]),
            rho_hat=float(payload["rho_hat"]),
            var_boot=None if var_boot is None else float(var_boot),
            boot_retries=int(payload.get("boot_retries", 0) or 0),
        )


@dataclass(frozen=True)
class DecompositionReport:
    var_total: float
    eif_term: float
    var_rem: float
    cross_term: float
    closure_gap: float
    mc_se_total: float
    replicates: int

    @property
    def closes(self) -> bool:
        return abs(self.closure_gap) <= 3.0 * self.mc_se_total

    def to_payload(self) -> Dict[str, object]:
        return {
            "var_total": self.var_total,
            "eif_term": self.eif_term,
            "var_rem": self.var_rem,
            "cross_term": self.cross_term,
            "closure_gap": self.closure_gap,
            "mc_se_total": self.mc_se_total,
            "replicates": self.replicates,
            "closes": self.closes,
        }


@dataclass(frozen=True)
class RegimeVerdict:
    verdict: str
    rho_by_n: Tuple[Tuple[int, float], ...]
    trend_statistic: float
    threshold: float
    min_relative_decrease: float

    def to_payload(self) -> Dict[str, object]:
        return {
            "verdict": self.verdict,
            "rho_by_n": [list(item) for item in self.rho_by_n],
            "trend_statistic": self.trend_statistic,
            "threshold": self.threshold,
            "min_relative_decrease": self.min_relative_decrease,
        }


@dataclass(frozen=True)
class ReplicateRecord:
    """Outcome of one Monte Carlo replicate inside one study cell."""

    replicate_index: int
    size: int
    icc: float
    psi_hat: Optional[float] = None
    variance_report: Optional[VarianceReport] = None
    ci_contains: Dict[str, bool] = field(default_factory=dict)
    ci_width: Dict[str, float] = field(default_factory=dict)
    ci_rejects_null: Dict[str, bool] = field(default_factory=dict)
    mean_true_d: Optional[float] = None
    r_rem: Optional[float] = None
    c_n: Optional[float] = None
    boot_pivots: Optional[List[float]] = None
    failure: Optional[str] = None
    method_failures: Dict[str, str] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def to_payload(self) -> Dict[str, object]:
        return {
            "replicate_index": self.replicate_index,
            "size": self.size,
            "icc": self.icc,
            "psi_hat": self.psi_hat,
            "variance_report": None if self.variance_report is None else self.variance_report.to_payload(),
            "ci_contains": dict(self.ci_contains),
            "ci_width": dict(self.ci_width),
            "ci_rejects_null": dict(self.ci_rejects_null),
            "mean_true_d": self.mean_true_d,
            "r_rem": self.r_rem,
            "c_n": self.c_n,
            "boot_pivots": self.boot_pivots,
            "failure": self.failure,
            "method_failures": dict(self.method_failures),
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "ReplicateRecord":
        report = payload.get("variance_report")

        def _opt_float(key: str) -> Optional[float]:
            value = payload.get(key)
            return None if value is None else float(value)

        pivots = payload.get("boot_pivots")
        return cls(
            replicate_index=int(payload["replicate_index"]),
            size=int(payload["size"]),
            icc=float(payload.get("icc", 0.0)),
            psi_hat=_opt_float("psi_hat"),
            variance_report=None if not report else VarianceReport.from_payload(report),
            ci_contains={str(k): bool(v) for k, v in dict(payload.get("ci_contains") or {}).items()},
            ci_width={str(k): float(v) for k, v in dict(payload.get("ci_width") or {}).items()},
            ci_rejects_null={str(k): bool(v) for k, v in dict(payload.get("ci_rejects_null") or {}).items()},
            mean_true_d=_opt_float("mean_true_d"),
            r_rem=_opt_float("r_rem"),
            c_n=_opt_float("c_n"),
            boot_pivots=None if pivots is None else [float(v) for v in pivots],
            failure=payload.get("failure") or None,
            method_failures={str(k): str(v) for k, v in dict(payload.get("method_failures") or {}).items()},
        )
