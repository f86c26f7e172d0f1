"""Dataset ingestion/validation and report serialization."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import DataError

__all__ = ["ingest_csv", "write_dataset_csv", "report_to_json"]

_MAX_REPORTED_ERRORS = 10


def ingest_csv(path, *, exposure: str = "a", outcome: str = "y",
               covariates: tuple[str, ...] = ()) -> pd.DataFrame:
    """Read and validate an analysis dataset.

    Requires a UTF-8 CSV with a header, a binary exposure column, and a
    non-negative integer outcome column. Rows with missing or malformed
    values in required columns are rejected with row-numbered diagnostics
    (row numbers count data rows from 1).
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file (no header row)") from None
            raw_rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read '{path}': {exc}") from None

    header = [h.strip() for h in header]
    needed = [exposure, outcome, *covariates]
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(
            f"{path}: unknown column(s) {missing}; file has columns {header}")
    if not raw_rows:
        raise DataError(f"{path}: no data rows")

    idx = {c: header.index(c) for c in header}
    errors: list[str] = []
    parsed: dict[str, list[float]] = {c: [] for c in header}

    for rownum, row in enumerate(raw_rows, start=1):
        if len(row) != len(header):
            errors.append(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            continue
        values = {}
        row_bad = False
        for col in header:
            cell = row[idx[col]].strip()
            if col in needed and cell == "":
                errors.append(f"row {rownum}: missing value in required column '{col}'")
                row_bad = True
                continue
            try:
                values[col] = float(cell) if cell != "" else np.nan
            except ValueError:
                errors.append(
                    f"row {rownum}: value '{cell}' in column '{col}' is not numeric")
                row_bad = True
        if row_bad:
            continue
        av = values[exposure]
        if av not in (0.0, 1.0):
            errors.append(
                f"row {rownum}: exposure column '{exposure}' has value "
                f"'{row[idx[exposure]].strip()}'; expected 0 or 1")
            continue
        yv = values[outcome]
        if yv < 0 or yv != int(yv):
            errors.append(
                f"row {rownum}: outcome column '{outcome}' has value "
                f"'{row[idx[outcome]].strip()}'; expected a non-negative integer")
            continue
        for col in header:
            parsed[col].append(values.get(col, np.nan))

    if errors:
        shown = errors[:_MAX_REPORTED_ERRORS]
        more = len(errors) - len(shown)
        suffix = f" (+{more} more)" if more > 0 else ""
        raise DataError(f"{path}: invalid rows:\n  " + "\n  ".join(shown) + suffix)

    return pd.DataFrame(parsed)


def write_dataset_csv(data: pd.DataFrame, path) -> None:
    """Write a dataset in the same column contract that ingest_csv reads."""
    data.to_csv(path, index=False)


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(_canonical(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def report_to_json(report: dict) -> str:
    """Serialize an estimate report with a stable key order."""
    return json.dumps(_canonical(report), indent=2, sort_keys=True)
