"""Scenario configuration files (TOML).

Every section and key is checked against the schema below; unknown keys are
errors so that typos cannot silently change a study.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import boundary, geometry, vmeasure
from .spectral.pipeline import GridSpec


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry as section.key."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key:
            where.append(f"key '{key}'")
        if line:
            where.append(f"line {line}")
        super().__init__(f"{message}" + (f" ({', '.join(where)})" if where else ""))


# section -> key -> (type, default); a default of REQUIRED must be given
REQUIRED = object()
_NUM = (int, float)

SCHEMA = {
    "scenario": {"name": (str, "scenario"), "description": (str, "")},
    "domain": {
        "kind": (str, REQUIRED),
        "dim": (int, 2),
        "radius": (_NUM, 1.0),
        "semi_axes": (list, [2.0, 1.0]),
        "r_in": (_NUM, 0.5),
        "r_out": (_NUM, 1.0),
        "r0": (_NUM, 1.0),
        "cos_coeffs": (list, []),
        "sin_coeffs": (list, []),
    },
    "measure": {
        "preset": (str, REQUIRED),
        "rho_min": (_NUM, 0.0),
        "rho_max": (_NUM, 1.0),
        "speed": (_NUM, 1.0),
        "mass": (_NUM, 1.0),
        "speeds": (list, []),
        "masses": (list, []),
    },
    "boundary": {
        "alpha": (_NUM, 0.0),
        "alpha_kind": (str, "constant"),
        "alpha_values": (list, []),
        "alpha_axis": (int, 0),
        "reflection": (str, "specular"),
        "kernel": (str, "maxwell"),
        "theta": (_NUM, 1.0),
        "p": (_NUM, 3.0),
        "q": (_NUM, 2.0),
        "cutoff": (_NUM, 1.0),
    },
    "grids": {
        "boundary_cells": (int, 128),
        "angle_cells": (int, 64),
        "speed_cells": (int, 16),
        "spacing": (str, "uniform"),
        "q": (int, 4),
        "phase_boxes": (int, 4),
        "phase_speed_cells": (int, 4),
        "phase_angle_cells": (int, 4),
        "q_x": (int, 4),
        "q_dir": (int, 4),
        "q_speed": (int, 8),
        "condition_boundary_cells": (int, 32),
        "condition_angle_cells": (int, 16),
        "floors": (list, []),
        "refinement_levels": (list, [1, 2]),
    },
    "run": {
        "particles": (int, 10_000),
        "t_end": (_NUM, 10.0),
        "sample_dt": (_NUM, 1.0),
        "sample_times": (list, []),
        "seed": (int, REQUIRED),
        "initial": (str, "uniform"),
        "eps": (_NUM, 0.1),
        "M": (_NUM, 4.0),
        "eps_high": (_NUM, 0.1),
        "threads": (int, 1),
        "l1_to_invariant": (bool, False),
    },
    "study": {
        "axis": (str, "grid"),
        "values": (list, []),
        "replicas": (int, 1),
    },
    "tolerances": {
        "tol_boundary": (_NUM, geometry.TOL_BOUNDARY_REL),
        "tol_graze": (_NUM, geometry.TOL_GRAZE),
        "series_tol": (_NUM, 1e-10),
        "power_tol": (_NUM, 1e-10),
        "power_max_iter": (int, 100_000),
        "rho_freeze": (_NUM, 1e-6),
        "event_budget": (int, 1_000_000),
    },
    "outputs": {"directory": (str, "out"), "formats": (list, ["csv", "json"])},
}

DOMAIN_KINDS = ("disk", "ball", "ellipse", "ellipsoid", "annulus", "shell", "smooth-star")
MEASURE_PRESETS = ("lebesgue-annulus", "single-speed", "multigroup")
KERNELS = ("maxwell", "heavy-low-speed", "none")
INITIAL_LAWS = ("uniform", "invariant")
STUDY_AXES = ("grid", "N", "p", "alpha")


@dataclass
class ScenarioConfig:
    data: dict
    source: str = ""

    def __getitem__(self, section):
        return self.data[section]

    @property
    def name(self):
        return self.data["scenario"]["name"]

    def config_hash(self):
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **sections):
        data = copy.deepcopy(self.data)
        for sec, vals in sections.items():
            for k, v in vals.items():
                _check_type(sec, k, v)
                data[sec][k] = v
        return validate(data, self.source)

    # builders -------------------------------------------------------------

    def domain(self):
        d = self.data["domain"]
        kind = d["kind"]
        if kind == "disk":
            return geometry.Disk(radius=float(d["radius"]), dim=d["dim"])
        if kind == "ball":
            return geometry.Ball(float(d["radius"]))
        if kind in ("ellipse", "ellipsoid"):
            return geometry.Ellipse(semi_axes=tuple(d["semi_axes"]))
        if kind == "annulus":
            return geometry.Annulus(r_in=float(d["r_in"]), r_out=float(d["r_out"]), dim=d["dim"])
        if kind == "shell":
            return geometry.Shell(float(d["r_in"]), float(d["r_out"]))
        return geometry.SmoothStar(r0=float(d["r0"]), cos_coeffs=tuple(d["cos_coeffs"]),
                                   sin_coeffs=tuple(d["sin_coeffs"]))

    def measure(self):
        m = self.data["measure"]
        dim = self.domain().dim
        if m["preset"] == "lebesgue-annulus":
            return vmeasure.lebesgue_annulus(dim, m["rho_min"], m["rho_max"])
        if m["preset"] == "single-speed":
            return vmeasure.single_speed(dim, m["speed"], m["mass"])
        return vmeasure.multigroup(dim, m["speeds"], m["masses"])

    def alpha_field(self):
        b = self.data["boundary"]
        if b["alpha_kind"] == "constant":
            return boundary.AlphaField("constant", float(b["alpha"]))
        return boundary.AlphaField(b["alpha_kind"], values=tuple(float(a) for a in b["alpha_values"]),
                                   axis=b["alpha_axis"])

    def kernel(self, measure=None):
        b = self.data["boundary"]
        measure = measure or self.measure()
        if b["kernel"] == "maxwell":
            return boundary.MaxwellKernel(measure, float(b["theta"]))
        if b["kernel"] == "heavy-low-speed":
            return boundary.HeavyLowSpeedKernel(measure, float(b["p"]), float(b["q"]), float(b["cutoff"]))
        return None

    def boundary_operator(self, measure=None):
        b = self.data["boundary"]
        try:
            return boundary.PartlyDiffuseBoundary(self.alpha_field(), boundary.ReflectionLaw(b["reflection"]),
                                                  self.kernel(measure))
        except boundary.BoundaryError as exc:
            raise ConfigError(str(exc), key="boundary") from exc

    def grid_spec(self):
        g = self.data["grids"]
        fields = {k: v for k, v in g.items() if k != "refinement_levels"}
        fields["floors"] = tuple(float(f) for f in fields["floors"])
        return GridSpec(**fields)

    def sample_times(self):
        r = self.data["run"]
        if r["sample_times"]:
            return [float(t) for t in r["sample_times"]]
        n = int(round(r["t_end"] / r["sample_dt"]))
        return [k * r["sample_dt"] for k in range(n + 1)]

    def tolerances(self):
        return dict(self.data["tolerances"])


def _check_type(section, key, value):
    if section not in SCHEMA:
        raise ConfigError("unknown section", key=section)
    if key not in SCHEMA[section]:
        raise ConfigError("unknown key", key=f"{section}.{key}")
    typ = SCHEMA[section][key][0]
    ok = isinstance(value, typ) and not (typ in (int, _NUM) and isinstance(value, bool))
    if not ok:
        name = typ.__name__ if isinstance(typ, type) else "number"
        raise ConfigError(f"expected {name}, got {type(value).__name__}", key=f"{section}.{key}")


def _line_of(text, section, key):
    if not text:
        return None
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s.strip("[]").strip()
        elif current == section and s.split("=")[0].strip() == key:
            return i
    return None


def validate(raw: dict, text: str = "") -> ScenarioConfig:
    data = {}
    for sec, keys in raw.items():
        if sec not in SCHEMA:
            line = next((i for i, r in enumerate(text.splitlines(), 1) if r.strip() == f"[{sec}]"), None)
            raise ConfigError("unknown section", key=sec, line=line)
        if not isinstance(keys, dict):
            raise ConfigError("section must be a table", key=sec)
        for k, v in keys.items():
            try:
                _check_type(sec, k, v)
            except ConfigError as exc:
                exc.line = _line_of(text, sec, k)
                raise ConfigError(str(exc).split(" (")[0], key=exc.key, line=exc.line) from None
    for sec, keys in SCHEMA.items():
        given = raw.get(sec, {})
        data[sec] = {}
        for k, (_, default) in keys.items():
            if k in given:
                data[sec][k] = copy.deepcopy(given[k])
            elif default is REQUIRED:
                raise ConfigError("missing required key", key=f"{sec}.{k}")
            else:
                data[sec][k] = copy.deepcopy(default)
    _semantic_checks(data)
    return ScenarioConfig(data, text)


def _semantic_checks(d):
    def need(cond, msg, key):
        if not cond:
            raise ConfigError(msg, key=key)

    need(d["domain"]["kind"] in DOMAIN_KINDS, f"unknown domain kind, expected one of {DOMAIN_KINDS}", "domain.kind")
    need(d["measure"]["preset"] in MEASURE_PRESETS, f"unknown measure preset, expected one of {MEASURE_PRESETS}",
         "measure.preset")
    need(d["boundary"]["kernel"] in KERNELS, f"unknown kernel, expected one of {KERNELS}", "boundary.kernel")
    need(d["boundary"]["reflection"] in ("specular", "bounce-back"), "unknown reflection law", "boundary.reflection")
    need(d["run"]["initial"] in INITIAL_LAWS, f"unknown initial law, expected one of {INITIAL_LAWS}", "run.initial")
    need(d["study"]["axis"] in STUDY_AXES, f"unknown study axis, expected one of {STUDY_AXES}", "study.axis")
    need(d["run"]["eps"] < d["run"]["M"], "observable window needs eps < M", "run.eps")
    need(d["run"]["particles"] > 0, "particle count must be positive", "run.particles")
    need(d["run"]["t_end"] >= 0 and d["run"]["sample_dt"] > 0, "need t_end >= 0 and sample_dt > 0", "run.sample_dt")
    need(0 <= d["run"]["seed"] < 2 ** 64, "seed must be an unsigned 64-bit integer", "run.seed")
    need(d["run"]["threads"] >= 1, "threads must be at least 1", "run.threads")
    need(d["grids"]["spacing"] in ("uniform", "geometric"), "unknown spacing", "grids.spacing")
    m = d["measure"]
    if m["preset"] == "lebesgue-annulus":
        need(0 <= m["rho_min"] < m["rho_max"] and math.isfinite(m["rho_max"]),
             "need 0 <= rho_min < rho_max < inf", "measure.rho_max")
    if m["preset"] == "multigroup":
        need(len(m["speeds"]) == len(m["masses"]) > 0, "speeds and masses must match", "measure.speeds")
    b = d["boundary"]
    vals = [b["alpha"]] if b["alpha_kind"] == "constant" else b["alpha_values"]
    need(all(0 <= a <= 1 for a in vals), "alpha must lie in [0, 1]", "boundary.alpha")
    if b["kernel"] == "none":
        need(min(vals) >= 1.0, "a diffuse part needs a kernel", "boundary.kernel")
    for key in ("tol_boundary", "tol_graze", "series_tol", "power_tol", "rho_freeze"):
        need(d["tolerances"][key] > 0, "tolerance must be positive", f"tolerances.{key}")


def load(path) -> ScenarioConfig:
    """Read and validate a TOML scenario; ``preset:NAME`` loads a packaged preset."""
    path = str(path)
    if path.startswith("preset:"):
        text = preset_text(path.split(":", 1)[1])
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", key=None) from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"TOML syntax error: {exc}", line=line) from exc
    return validate(raw, text)


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("pdtransport.presets").iterdir() if p.name.endswith(".toml"))


def preset_text(name):
    f = resources.files("pdtransport.presets").joinpath(f"{name}.toml")
    if not f.is_file():
        raise ConfigError(f"unknown preset, available: {preset_names()}", key=name)
    return f.read_text(encoding="utf-8")


def apply_tolerances(cfg: ScenarioConfig):
    """Install configured tolerances that live as module constants.

    The remaining ones (tol_graze, series and power tolerances, event budget)
    are passed explicitly by the commands.
    """
    from . import pdmp
    tol = cfg.tolerances()
    geometry.TOL_BOUNDARY_REL = tol["tol_boundary"]
    pdmp.RHO_FREEZE = tol["rho_freeze"]
    return tol
