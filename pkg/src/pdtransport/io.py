"""Output artifacts: CSV tables, JSON summaries and the run manifest."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
from importlib import metadata
from pathlib import Path

import numpy as np

from . import geometry

MANIFEST = "manifest.json"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    """RFC-4180 style: header row, '.' decimals, LF line endings."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path):
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, (np.floating, float)):
        return float(o) if np.isfinite(o) else None
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path


def sha256(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def software_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def write_manifest(outdir, cfg, command, tolerances, results=None, started=None):
    """List every file in ``outdir`` with its checksum, plus the settings in effect."""
    outdir = Path(outdir)
    files = {}
    for p in sorted(outdir.iterdir()):
        if p.is_file() and p.name != MANIFEST:
            files[p.name] = {"sha256": sha256(p), "bytes": p.stat().st_size}
    now = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    tol = dict(tolerances)
    tol["omega_gradient_sign"] = geometry.OMEGA_GRADIENT_SIGN
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "scenario": cfg.name,
        "software_version": software_version(),
        "started": started or now,
        "finished": now,
        "tolerances": tol,
        "results": results or {},
        "files": files,
    }
    return write_json(outdir / MANIFEST, manifest)


def phase_rows(pgrid, density_values):
    """Rows (cell, box, speed, direction, density, mass) of a phase-grid density."""
    dens = np.asarray(density_values, float)
    mass = dens * pgrid.weight
    b, k, j = pgrid.unravel(np.arange(pgrid.size))
    return [(int(c), int(bb), int(kk), int(jj), float(d), float(m))
            for c, bb, kk, jj, d, m in zip(range(pgrid.size), b, k, j, dens, mass)]


PHASE_HEADER = ("cell", "box", "speed_cell", "direction_cell", "density", "mass")


def read_phase_masses(path, size):
    header, rows = read_csv(path)
    if tuple(header) != PHASE_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    if len(rows) != size:
        raise ValueError(f"{path}: {len(rows)} cells, expected {size}")
    return np.array([float(r[5]) for r in rows])


def trace_rows(tgrid, phi):
    b, k, j = tgrid.unravel(np.arange(tgrid.size))
    return [(int(c), int(bb), int(kk), int(jj), float(p)) for c, bb, kk, jj, p in zip(range(tgrid.size), b, k, j, phi)]


TRACE_HEADER = ("cell", "boundary_cell", "speed_cell", "direction_cell", "mass")
