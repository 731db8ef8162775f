"""
Study configuration: a validated pydantic model fed from defaults, ``ALEVAR_*``
environment variables, a key=value config file and CLI flags, in that order.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from alevar import constants
from alevar.core.dgp import MECHANISMS
from alevar.core.errors import ConfigError
from alevar.inference.resampling import CI_METHODS, Critical

STUDY_KINDS = (
    "aipw-strong-decay",
    "near-boundary",
    "clustered-icc-sweep",
    "bootstrap-consistency",
    "oracle",
)
CLUSTERED_KINDS = ("clustered-icc-sweep",)
REPORT_FORMATS = ("csv", "markdown")

DEFAULT_SIZES = {
    "aipw-strong-decay": (200, 500, 1000, 2000),
    "near-boundary": (500, 1000, 2000),
    "clustered-icc-sweep": (30,),
    "bootstrap-consistency": (200, 2000),
    "oracle": (500, 1000),
}
DEFAULT_ICC = {"clustered-icc-sweep": (0.01, 0.05, 0.10, 0.20)}

# Config-file and flag spellings mapped onto model fields.
KEY_ALIASES = {
    "study": "study_kind",
    "kind": "study_kind",
    "icc": "icc_values",
    "boot": "boot_b",
    "seed": "base_seed",
    "workers": "worker_count",
    "out": "output_path",
    "format": "output_format",
    "records": "records_path",
    "calibration": "calibration_path",
    "threshold": "regime_threshold",
}

ENV_FIELDS = {
    "ALEVAR_WORKERS": "worker_count",
    "ALEVAR_BASE_SEED": "base_seed",
    "ALEVAR_CALIBRATION_PATH": "calibration_path",
}


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class StudyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    study_kind: str = "aipw-strong-decay"
    sizes: Tuple[int, ...] = ()
    icc_values: Tuple[float, ...] = ()
    reps: int = constants.REPS
    boot_b: int = constants.BOOT_B
    base_seed: int = constants.BASE_SEED
    alpha: float = round(1.0 - constants.LEVEL, 12)
    critical: str = "auto"
    lambda_q: float = constants.LAMBDA_Q
    lambda_g: float = constants.LAMBDA_G
    mechanism: str = constants.NEAR_BOUNDARY_MECHANISM
    cluster_size: int = constants.CLUSTER_SIZE
    methods: Tuple[str, ...] = CI_METHODS
    output_path: Optional[Path] = None
    output_format: str = "csv"
    records_path: Optional[Path] = None
    calibration_path: Optional[Path] = None
    worker_count: int = Field(default=1, ge=1)
    regime_threshold: float = constants.REGIME_THRESHOLD

    @field_validator("sizes", "icc_values", "methods", mode="before")
    @classmethod
    def _parse_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("study_kind")
    @classmethod
    def _known_kind(cls, value: str) -> str:
        if value not in STUDY_KINDS:
            raise ValueError(f"unknown study kind {value!r}; choose from {', '.join(STUDY_KINDS)}")
        return value

    @field_validator("reps")
    @classmethod
    def _positive_reps(cls, value: int) -> int:
        if value < 1:
            raise ValueError("reps must be at least 1")
        return value

    @field_validator("boot_b")
    @classmethod
    def _boot_size(cls, value: int) -> int:
        if value == 1 or value < 0:
            raise ValueError("boot must be 0 (disabled) or at least 2")
        return value

    @field_validator("alpha")
    @classmethod
    def _alpha_range(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return value

    @field_validator("critical")
    @classmethod
    def _critical_family(cls, value: str) -> str:
        value = value.strip().lower()
        if value in ("auto", "z", "t"):
            return value
        Critical.parse(value)
        return value

    @field_validator("mechanism")
    @classmethod
    def _known_mechanism(cls, value: str) -> str:
        if value not in MECHANISMS:
            raise ValueError(f"unknown mechanism {value!r}")
        return value

    @field_validator("output_format")
    @classmethod
    def _known_format(cls, value: str) -> str:
        value = value.strip().lower()
        if value == "md":
            value = "markdown"
        if value not in REPORT_FORMATS:
            raise ValueError(f"format must be one of {REPORT_FORMATS}")
        return value

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [m for m in value if m not in CI_METHODS]
        if unknown or not value:
            raise ValueError(f"methods must be a nonempty subset of {CI_METHODS}, got {list(value)}")
        return value

    @model_validator(mode="before")
    @classmethod
    def _grid_defaults(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            kind = data.get("study_kind", "aipw-strong-decay")
            if not data.get("sizes") and kind in DEFAULT_SIZES:
                data["sizes"] = DEFAULT_SIZES[kind]
            if not data.get("icc_values"):
                data["icc_values"] = DEFAULT_ICC.get(kind, (0.0,))
        return data

    @model_validator(mode="after")
    def _grid(self) -> "StudyConfig":
        if not self.sizes:
            raise ValueError("sizes must be nonempty")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"sizes must be strictly ascending, got {list(self.sizes)}")
        if min(self.sizes) < (3 if self.clustered else 10):
            raise ValueError(f"sizes too small for {self.study_kind}: {list(self.sizes)}")
        if any(not 0.0 <= icc < 1.0 for icc in self.icc_values):
            raise ValueError("icc values must lie in [0, 1)")
        if not self.clustered and any(icc != 0.0 for icc in self.icc_values):
            raise ValueError(f"{self.study_kind} studies are i.i.d.; icc must be 0")
        if self.clustered and self.cluster_size < 1:
            raise ValueError("cluster size must be at least 1")
        cap = constants.LOO_MAX_CLUSTERS if self.clustered else constants.LOO_MAX_UNITS
        if max(self.sizes) > cap:
            unit = "clusters" if self.clustered else "units"
            raise ValueError(
                f"full leave-one-out refits are capped at {cap} {unit}; got {max(self.sizes)}. "
                "Reduce --sizes or split the study."
            )
        return self

    @property
    def clustered(self) -> bool:
        return self.study_kind in CLUSTERED_KINDS

    @property
    def level(self) -> float:
        return 1.0 - self.alpha

    def critical_for(self, size: int) -> Critical:
        """Critical family for one cell; ``auto`` means t(J-1) for clustered cells and z otherwise."""
        if self.critical == "z":
            return Critical("z")
        if self.critical == "auto":
            return Critical("t", size - 1) if self.clustered else Critical("z")
        if self.critical == "t":
            return Critical("t", size - 1)
        return Critical.parse(self.critical)

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def build_config(values: Mapping[str, Any]) -> StudyConfig:
    try:
        return StudyConfig(**dict(values))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid study config: {problems}") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid study config: {exc}") from exc


def normalise_keys(values: Mapping[str, Any]) -> Dict[str, Any]:
    normalised: Dict[str, Any] = {}
    for key, value in values.items():
        if value is None:
            continue
        field = KEY_ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if field == "lambda":
            parts = _split_list(value)
            parts = parts if isinstance(parts, (list, tuple)) else [parts]
            if len(parts) not in (1, 2):
                raise ConfigError(f"lambda takes one or two values, got {value!r}")
            normalised["lambda_q"] = parts[0]
            normalised["lambda_g"] = parts[-1]
            continue
        normalised[field] = value
    return normalised


def parse_key_values(text: str, *, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path: str | Path) -> Dict[str, Any]:
    target = Path(path)
    try:
        text = target.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {target}: {exc}") from exc
    return normalise_keys(parse_key_values(text, source=str(target)))


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    environ = os.environ if environ is None else environ
    return {field: environ[name] for name, field in ENV_FIELDS.items() if environ.get(name, "").strip()}


def resolve_config(
    flags: Optional[Mapping[str, Any]] = None,
    *,
    config_path: Optional[str | Path] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> StudyConfig:
    """Merge environment, config file and flags (highest wins) over the model defaults."""
    merged: Dict[str, Any] = {}
    merged.update(env_overrides(environ))
    if config_path is not None:
        merged.update(load_config_file(config_path))
    merged.update(normalise_keys(flags or {}))
    return build_config(merged)
