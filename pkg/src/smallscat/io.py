"""File formats: grid/field files, CSV tables and atomic writes.

A grid or field file is a JSON header plus a whitespace-separated text file
holding one ``re im`` pair per voxel in row-major (x slowest) order::

    {"format": "smallscat-grid", "version": 1, "field": "q0",
     "lower": [...], "spacing": 0.1, "shape": [nx, ny, nz], "k": 2.0,
     "data": "q0.txt"}
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .background import PotentialGrid
from .errors import ConfigurationError

GRID_FORMAT = "smallscat-grid"
GRID_VERSION = 1


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, payload) -> Path:
    return atomic_write_text(path, dumps_json(payload))


def fmt(x) -> str:
    """Shortest round-trip float repr; stable across runs."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not np.isfinite(x):
        return "nan" if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return repr(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=",", lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def parse_complex(value) -> complex:
    """Accept a number, a ``[re, im]`` pair or a string like ``"1.5+0.1j"``."""
    if isinstance(value, bool):
        raise ConfigurationError(f"not a complex number: {value!r}")
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, str):
        try:
            return complex(value.replace(" ", ""))
        except ValueError:
            pass
    raise ConfigurationError(f"not a complex number: {value!r}")


# -- grid and field files -----------------------------------------------------


def write_field(path, grid: PotentialGrid, values, field: str) -> list[Path]:
    """Write a header JSON and a sibling ``.txt`` data file; returns both paths."""
    path = Path(path)
    data_path = path.with_suffix(".txt")
    v = np.asarray(values).astype(complex).ravel()
    lines = [f"{fmt(z.real)} {fmt(z.imag)}" for z in v]
    atomic_write_text(data_path, "\n".join(lines) + "\n")
    header = {
        "format": GRID_FORMAT,
        "version": GRID_VERSION,
        "field": field,
        "lower": grid.lower.tolist(),
        "spacing": grid.spacing,
        "shape": list(grid.shape),
        "k": grid.k,
        "order": "row-major",
        "data": data_path.name,
    }
    write_json(path, header)
    return [path, data_path]


def read_field(path):
    """Return ``(header, values)`` with values shaped like the grid."""
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read field file {path}: {exc}") from exc
    if header.get("format") != GRID_FORMAT:
        raise ConfigurationError(f"{path}: not a {GRID_FORMAT} file")
    shape = tuple(int(n) for n in header["shape"])
    if "values" in header:
        raw = np.asarray(header["values"], float).reshape(-1, 2)
    else:
        raw = np.loadtxt(path.parent / header["data"], ndmin=2)
    if raw.shape != (int(np.prod(shape)), 2):
        raise ConfigurationError(f"{path}: expected {np.prod(shape)} (re, im) rows, got {raw.shape}")
    return header, (raw[:, 0] + 1j * raw[:, 1]).reshape(shape)


def write_grid(path, grid: PotentialGrid) -> list[Path]:
    return write_field(path, grid, grid.q0, "q0")


def read_grid(path, max_kh: float = 0.5) -> PotentialGrid:
    header, values = read_field(path)
    if header.get("field", "q0") not in ("q0", "n0"):
        raise ConfigurationError(f"{path}: field {header.get('field')!r} is not a potential")
    k = float(header["k"])
    if header.get("field") == "n0":
        values = k**2 * (1.0 - values)
    return PotentialGrid(header["lower"], float(header["spacing"]), values, k, max_kh)
