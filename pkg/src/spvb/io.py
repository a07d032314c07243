"""File formats: CSV datasets, flat TOML settings, exact JSON, fit state."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from spvb.config import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

COORD_COLUMNS = ("x", "y")
DEFAULT_RESPONSE = "response"


class InputError(ValueError):
    """A user-supplied file is missing, malformed or inconsistent."""


# ---------------------------------------------------------------------------
# Numbers
# ---------------------------------------------------------------------------


def fmt(v) -> str:
    """Full-precision text for one number (17 significant digits)."""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def _json_text(obj, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_text(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_json_text(v, indent + 1) for v in seq) + "]"
        items = [pad + _json_text(v, indent + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (bool, np.bool_, int, np.integer)):
        return fmt(obj)
    v = float(obj)
    if not math.isfinite(v):
        return json.dumps(fmt(v))
    return fmt(v)


def dump_json(obj, path) -> None:
    """Write JSON with every float at 17 significant digits; non-finite as strings."""
    Path(path).write_text(_json_text(obj) + "\n", encoding="utf-8")


def load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    return _restore_nonfinite(data)


def _restore_nonfinite(obj):
    if isinstance(obj, dict):
        return {k: _restore_nonfinite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore_nonfinite(v) for v in obj]
    if obj in ("nan", "inf", "-inf"):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(path, header, columns) -> None:
    """Columns of equal length; floats at 17 significant digits."""
    cols = [np.asarray(c) for c in columns]
    n = cols[0].shape[0] if cols else 0
    if any(c.shape[0] != n for c in cols):
        raise ValueError("columns must have equal lengths")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(n):
            w.writerow([fmt(c[i]) for c in cols])


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Header and a float matrix; reports the line of the first bad row."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise InputError(f"{path}: duplicate column names in header")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}, line {line}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise InputError(f"{path}, line {line}: non-numeric field") from None
            if not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path}, line {line}: non-finite value")
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return header, np.asarray(rows, dtype=float)


def read_dataset(path, response: str = DEFAULT_RESPONSE, covariates=None, require_response=True):
    """Coordinates, covariates and (optionally) the response from a CSV.

    Covariates default to every column other than the coordinates, the
    response and an optional ``index`` column.
    """
    header, M = read_table(path)
    missing = [c for c in COORD_COLUMNS if c not in header]
    if missing:
        raise InputError(f"{path}: missing coordinate column(s) {', '.join(missing)}")
    if require_response and response not in header:
        raise InputError(f"{path}: missing response column '{response}'")
    if covariates is None:
        skip = set(COORD_COLUMNS) | {response, "index"}
        covariates = [c for c in header if c not in skip]
    else:
        absent = [c for c in covariates if c not in header]
        if absent:
            raise InputError(f"{path}: missing covariate column(s) {', '.join(absent)}")
    if not covariates:
        raise InputError(f"{path}: no covariate columns")
    col = {c: i for i, c in enumerate(header)}
    coords = M[:, [col["x"], col["y"]]]
    X = M[:, [col[c] for c in covariates]]
    y = M[:, col[response]] if response in col else None
    return coords, X, y, list(covariates)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


def read_settings(path) -> dict:
    """Flat ``key = value`` settings (TOML syntax); nested tables are flattened."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    flat: dict = {}
    for k, v in data.items():
        if isinstance(v, dict):
            flat.update(v)
        else:
            flat[k] = v
    return flat
