"""Replicate-record registry: JSON persistence for the simulate -> diagnose hand-off."""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from alevar import __version__
from alevar.core.errors import ConfigError, ReportWriteError
from alevar.core.models import ReplicateRecord

UTC = timezone.utc
RECORDS_SCHEMA_VERSION = 1

CellKey = Tuple[int, float]


def load_json_registry(path: str | Path | None, *, default: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    if path is None:
        return dict(default or {})

    target_path = Path(path)
    if not target_path.exists():
        return dict(default or {})

    try:
        with target_path.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except (OSError, ValueError):
        return dict(default or {})

    if isinstance(payload, dict):
        return payload
    return dict(default or {})


def persist_json_registry(path: str | Path | None, payload: Mapping[str, Any]) -> None:
    if path is None:
        return

    target_path = Path(path)
    try:
        target_path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = target_path.with_suffix(target_path.suffix + ".tmp")
        with tmp_path.open("w", encoding="utf-8", newline="\n") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True, allow_nan=True)
        tmp_path.replace(target_path)
    except OSError as exc:
        raise ReportWriteError(f"cannot write {target_path}: {exc}") from exc


def records_payload(
    cells: Mapping[CellKey, Iterable[ReplicateRecord]],
    *,
    config: Mapping[str, Any],
    metadata: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    return {
        "schema_version": RECORDS_SCHEMA_VERSION,
        "alevar_version": __version__,
        "written_at": datetime.now(tz=UTC).isoformat(),
        "config": dict(config),
        "metadata": dict(metadata or {}),
        "cells": [
            {
                "size": int(size),
                "icc": float(icc),
                "records": [
                    record.to_payload() for record in sorted(records, key=lambda r: r.replicate_index)
                ],
            }
            for (size, icc), records in sorted(cells.items())
        ],
    }


def persist_records(
    path: str | Path,
    cells: Mapping[CellKey, Iterable[ReplicateRecord]],
    *,
    config: Mapping[str, Any],
    metadata: Optional[Mapping[str, Any]] = None,
) -> None:
    persist_json_registry(path, records_payload(cells, config=config, metadata=metadata))


def load_records(path: str | Path) -> Tuple[Dict[str, Any], Dict[CellKey, List[ReplicateRecord]]]:
    """Return (config echo, records by cell). Missing or unreadable files give empty results."""
    registry = load_json_registry(path)
    version = registry.get("schema_version")
    if registry and version != RECORDS_SCHEMA_VERSION:
        raise ConfigError(f"unsupported records schema_version {version!r} in {path}")
    cells: Dict[CellKey, List[ReplicateRecord]] = {}
    for cell in registry.get("cells", []):
        key = (int(cell["size"]), float(cell.get("icc", 0.0)))
        cells[key] = [ReplicateRecord.from_payload(item) for item in cell.get("records", [])]
    return dict(registry.get("config", {})), cells
