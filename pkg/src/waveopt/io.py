"""Artifact files: raw field dumps with JSON sidecars, trace storage, CSV
logs and TOML config loading.

Field dumps are raw IEEE-754 little-endian with the first grid axis varying
fastest; the sidecar records everything needed to reinterpret the bytes
exactly (dims, dtype, endianness, axis order, spacing, step index).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .grids import ConfigError, Grid


def _sidecar_path(path):
    return Path(path).with_suffix(".json")


def dump_field(path, values, grid: Grid, dx=None, dt=None, step_index=None,
               extra=None):
    """Write values to <path>.bin plus a sidecar describing the layout."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    values = np.asarray(values)
    if values.shape != grid.shape:
        raise ConfigError(f"field shape {values.shape} != grid {grid.shape}")
    dtype = "<f4" if values.dtype == np.float32 else "<f8"
    np.ravel(values, order="F").astype(dtype, copy=False).tofile(path)
    meta = {
        "dims": list(grid.shape),
        "dtype": "float32" if dtype == "<f4" else "float64",
        "endianness": "little",
        "axis_order": "first-axis-fastest",
        "dx": grid.dx if dx is None else dx,
    }
    if dt is not None:
        meta["dt"] = dt
    if step_index is not None:
        meta["step_index"] = step_index
    if extra:
        meta.update(extra)
    _sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_field(path):
    """Read a field dump back; returns (values, sidecar dict)."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    meta = json.loads(_sidecar_path(path).read_text())
    dtype = "<f4" if meta["dtype"] == "float32" else "<f8"
    flat = np.fromfile(path, dtype=dtype)
    dims = tuple(meta["dims"])
    if flat.size != int(np.prod(dims)):
        raise ConfigError(f"{path}: {flat.size} values, sidecar says {dims}")
    return flat.reshape(dims, order="F"), meta


def save_traces_csv(path, traces):
    """One row of comma-separated samples per sensor."""
    traces = np.asarray(traces)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in traces:
            writer.writerow([repr(float(v)) for v in row])
    return Path(path)


def load_traces_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append([float(v) for v in row])
    return np.array(rows)


def save_traces_raw(path, traces, dt):
    """float64 binary traces plus a {n_sensors, n_steps, dt} sidecar."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    traces = np.asarray(traces, dtype=np.float64)
    traces.astype("<f8").tofile(path)
    meta = {"n_sensors": int(traces.shape[0]), "n_steps": int(traces.shape[1]),
            "dt": float(dt)}
    _sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_traces(path):
    """Load traces from .csv or raw .bin (+sidecar)."""
    path = Path(path)
    if path.suffix == ".csv":
        return load_traces_csv(path)
    meta = json.loads(_sidecar_path(path).read_text())
    flat = np.fromfile(path, dtype="<f8")
    return flat.reshape(meta["n_sensors"], meta["n_steps"])


def write_csv(path, rows, header):
    """Deterministic CSV: full-precision float repr, stable column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            out = []
            for key in header:
                v = row[key] if isinstance(row, dict) else row[header.index(key)]
                out.append(repr(float(v)) if isinstance(v, float) else v)
            writer.writerow(out)
    return Path(path)


def write_metadata(out_dir, record):
    path = Path(out_dir) / "metadata.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True, default=str))
    return path


def load_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}")
