"""CSV and sidecar readers with schema validation.

Readers return plain dict-of-arrays tables.  Missing required columns
raise :class:`cavityfig.spec.SchemaError` naming the column and file;
empty cells (explicit nulls in scan exports) become NaN.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from pathlib import Path

import numpy as np

from .spec import REQUIRED_COLUMNS, SchemaError


def read_table(path: "str | Path") -> "dict[str, np.ndarray]":
    """Delimited text with a header row into named float columns."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty (no header row)") from None
        rows = list(reader)
    columns: "dict[str, list[float]]" = {name: [] for name in header}
    for row in rows:
        if len(row) != len(header):
            raise SchemaError(f"{path}: row with {len(row)} fields, header has {len(header)}")
        for name, cell in zip(header, row):
            columns[name].append(math.nan if cell == "" else float(cell))
    return {name: np.array(vals, dtype=float) for name, vals in columns.items()}


def require_columns(table: "dict[str, np.ndarray]", kind: str, path: Path) -> None:
    for name in REQUIRED_COLUMNS[kind]:
        if name not in table:
            raise SchemaError(f"{path}: missing required column {name!r} for kind {kind!r}")


def numbered_columns(table: "dict[str, np.ndarray]", prefix: str, suffix: str) -> "list[np.ndarray]":
    """Collect r1_, r2_, ... style column families in index order."""
    out = []
    k = 1
    while f"{prefix}{k}{suffix}" in table:
        out.append(table[f"{prefix}{k}{suffix}"])
        k += 1
    return out


def read_meta(path: "Path | None", *, required_by: str) -> "dict | None":
    """Optional JSON sidecar; a missing file degrades with a warning."""
    if path is None:
        return None
    path = Path(path)
    if not path.exists():
        warnings.warn(
            f"{required_by}: metadata sidecar {path} not found; annotations dropped",
            RuntimeWarning,
            stacklevel=2,
        )
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path}: sidecar is not valid JSON: {err}") from None
