"""Command line driver: ``pdtransport {validate,spectral,simulate,sweep-study}``.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import sparse

from . import boundary, config, geometry, io, pdmp, validation
from .spectral import density, eigen, operators, pipeline

log = logging.getLogger("pdtransport")

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Missing or inconsistent input files (reported like a config error)."""


NUMERICAL_ERRORS = (operators.LostMassError, boundary.SamplerFailure, geometry.GeometryError,
                    density.DivergentMassError, pdmp.InitialLawError, np.linalg.LinAlgError,
                    FloatingPointError, ValueError)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _prepare(args):
    cfg = config.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(run={"seed": int(args.seed)})
    if args.threads is not None:
        cfg = cfg.with_overrides(run={"threads": int(args.threads)})
    tol = config.apply_tolerances(cfg)
    out = Path(args.out or cfg["outputs"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return cfg, tol, out


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args):
    cfg, tol, out = _prepare(args)
    started = _now()
    domain = cfg.domain()
    measure = cfg.measure()
    H = cfg.boundary_operator(measure)
    edges = pipeline.trace_edges(measure, pipeline.GridSpec(speed_cells=8, spacing=cfg["grids"]["spacing"]))
    checks = validation.scenario_checks(domain, measure, H, trace_edges=edges)
    osc = validation.oscillation_report(H)
    report = {"checks": [c.as_dict() for c in checks], "oscillation": osc,
              "passed": all(c.passed for c in checks)}
    for c in checks:
        print(c.line())
    print(f"INFO oscillation predicate: {osc['predicate']} (bound {osc['bound']:.4g}; sufficient condition only)")
    io.write_json(out / "validate.json", report)
    io.write_manifest(out, cfg, "validate", tol, {"passed": report["passed"]}, started)
    return EXIT_OK if report["passed"] else EXIT_CHECK


# ---------------------------------------------------------------------------
# spectral


def _write_operators(out, res):
    """Coordinate-format text files: M0, the reflection part of H, and the diffuse factors of H."""
    for name, mat in (("M0", res.M0.matrix), ("H_reflection", res.H.matrix)):
        m = sparse.coo_matrix(mat)
        order = np.lexsort((m.row, m.col))
        io.write_csv(out / f"operator_{name}.csv", ("row", "col", "value"),
                     zip(m.row[order].tolist(), m.col[order].tolist(), m.data[order].tolist()))
    g = res.trace
    rows = []
    for k, blk in enumerate(res.H.blocks):
        for b in range(g.nb):
            for j in np.nonzero((blk.profile[b] != 0) | (blk.colweight[b] != 0))[0]:
                rows.append((k, b, int(j), float(blk.profile[b, j]), float(blk.colweight[b, j])))
    io.write_csv(out / "operator_H_diffuse.csv", ("block", "boundary_cell", "velocity_cell", "profile", "colweight"),
                 rows)


def run_spectral_from_config(cfg):
    domain = cfg.domain()
    measure = cfg.measure()
    H = cfg.boundary_operator(measure)
    tol = cfg.tolerances()
    return pipeline.run_spectral(domain, measure, H, cfg.grid_spec(), max_iter=tol["power_max_iter"],
                                 tol=tol["power_tol"])


def cmd_spectral(args):
    cfg, tol, out = _prepare(args)
    started = _now()
    res = run_spectral_from_config(cfg)
    _write_operators(out, res)
    io.write_csv(out / "phi.csv", io.TRACE_HEADER, io.trace_rows(res.trace, res.eig.phi))
    psi_file = out / "psi.csv"
    if res.psi is not None:
        io.write_csv(psi_file, io.PHASE_HEADER, io.phase_rows(res.phase, res.psi.density))
    elif psi_file.exists():
        psi_file.unlink()  # stale file from an earlier run
    summary = res.summary()
    summary["scenario"] = cfg.name
    osc = validation.oscillation_report(cfg.boundary_operator())
    summary["ress_bound"] = osc["bound"]
    summary["oscillation_predicate"] = osc["predicate"]
    io.write_json(out / "summary.json", summary)
    io.write_manifest(out, cfg, "spectral", tol, summary, started)
    print(f"lambda_max = {summary['lambda_max']:.12g} ({summary['status']}, {summary['fixed_point_label']})")
    print(f"additional condition: {summary['condition_verdict']}")
    for n in summary["notes"]:
        print(f"note: {n}")
    if not res.eig.converged:
        print("power iteration did not converge; see oscillation_diagnostic in summary.json", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _load_psi(cfg, out, args, phase):
    path = Path(args.psi) if getattr(args, "psi", None) else out / "psi.csv"
    if not path.exists():
        return None, path
    return io.read_phase_masses(path, phase.size), path


def simulate_from_config(cfg, psi_mass=None, threads=None, phase=None):
    domain = cfg.domain()
    measure = cfg.measure()
    H = cfg.boundary_operator(measure)
    run = cfg["run"]
    tol = cfg.tolerances()
    phase = phase or pipeline.observation_grid(domain, measure, cfg.grid_spec())
    if run["initial"] == "invariant":
        ens = pdmp.init_ensemble(domain, measure, run["particles"], law="phase", seed=run["seed"], phase=phase,
                                 masses=psi_mass)
    else:
        ens = pdmp.init_ensemble(domain, measure, run["particles"], seed=run["seed"])
    series = pdmp.run_observables(ens, domain, H, cfg.sample_times(), phase=phase, psi_mass=psi_mass,
                                  eps=run["eps"], M=run["M"], eps_high=run["eps_high"],
                                  threads=threads or run["threads"], tol_graze=tol["tol_graze"],
                                  budget=tol["event_budget"])
    return ens, series, phase


def cmd_simulate(args):
    cfg, tol, out = _prepare(args)
    started = _now()
    run = cfg["run"]
    domain = cfg.domain()
    measure = cfg.measure()
    phase = pipeline.observation_grid(domain, measure, cfg.grid_spec())
    psi_mass, psi_path = _load_psi(cfg, out, args, phase)
    if psi_mass is None and (run["l1_to_invariant"] or run["initial"] == "invariant"):
        raise InputError(f"{psi_path} is required (run the spectral command first or pass --psi)")
    ens, series, phase = simulate_from_config(cfg, psi_mass, phase=phase)
    (out / "series.csv").write_text(series.to_csv(), encoding="utf-8", newline="")
    masses, off = pdmp.empirical_masses(ens, phase)
    dens = np.where(phase.weight > 0, masses / np.where(phase.weight > 0, phase.weight, 1.0), 0.0)
    io.write_csv(out / "final_density.csv", io.PHASE_HEADER, io.phase_rows(phase, dens))
    cols = series.columns
    results = {"final": {c: (None if not np.isfinite(cols[c][-1]) else float(cols[c][-1])) for c in cols},
               "particles": ens.size, "events": int(ens.events.sum()), "budget_frozen": ens.budget_frozen,
               "grazing_tilted": ens.grazing_tilted, "off_grid_fraction": off, "seed": run["seed"]}
    io.write_manifest(out, cfg, "simulate", tol, results, started)
    for c, v in results["final"].items():
        if v is not None:
            print(f"{c} at t={series.times[-1]:g}: {v:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep study


def _study_grid(cfg, values):
    domain = cfg.domain()
    measure = cfg.measure()
    H = cfg.boundary_operator(measure)
    base = cfg.grid_spec()
    oracle = (cfg["boundary"]["kernel"] == "maxwell" and cfg["boundary"]["alpha_kind"] == "constant"
              and cfg["boundary"]["alpha"] == 0.0)
    rows = []
    for L in values:
        L = int(L)
        spec = pipeline.GridSpec(**{**base.__dict__, "boundary_cells": base.boundary_cells * L,
                                    "angle_cells": base.angle_cells * L, "speed_cells": base.speed_cells * L,
                                    "q_x": base.q_x * L, "q_dir": base.q_dir * L, "q_speed": base.q_speed * L})
        res = pipeline.run_spectral(domain, measure, H, spec, subdominant=False)
        err = np.nan
        if oracle and res.psi is not None:
            err = pipeline.sup_cell_error(res.psi.density, density.maxwell_phase_oracle(res.phase, cfg["boundary"]["theta"]))
        ident = max(validation.identity_errors(domain, measure, boxes=8 * L).values())
        rows.append((L, res.trace.size, res.eig.lam, err, ident))
    return ("level", "trace_cells", "lambda_max", "psi_sup_error", "identity_error"), rows, {}


def _study_N(cfg, values):
    res = run_spectral_from_config(cfg)
    if res.psi is None:
        raise InputError("the N study needs an invariant density")
    reps = cfg["study"]["replicas"]
    seed = cfg["run"]["seed"]
    rows = []
    for N in values:
        N = int(N)
        ls = []
        for r in range(reps):
            ens = pdmp.init_ensemble(cfg.domain(), cfg.measure(), N, law="phase", seed=seed + r,
                                     phase=res.phase, masses=res.psi.mass)
            m, _ = pdmp.empirical_masses(ens, res.phase)
            ls.append(density.l1_distance(m, res.psi.mass))
        rows.append((N, float(np.mean(ls)), float(np.std(ls))))
    n = np.array([r[0] for r in rows], float)
    l1 = np.array([r[1] for r in rows])
    slope = float(np.polyfit(np.log(n), np.log(l1), 1)[0]) if len(rows) > 1 else np.nan
    return ("N", "l1_mean", "l1_sd"), rows, {"loglog_slope": slope}


def _study_p(cfg, values):
    domain = cfg.domain()
    measure = cfg.measure()
    b = cfg["boundary"]
    x = domain.charts()[0].point(np.full((1, domain.dim - 1), 0.25))[0]
    rows = []
    for p in values:
        oracle = boundary.radial_divergence_oracle(domain.dim, float(p), float(b["q"]))
        try:
            K = boundary.HeavyLowSpeedKernel(measure, float(p), float(b["q"]), float(b["cutoff"]))
        except boundary.BoundaryError:
            # the kernel has infinite mass near v = 0, so there is nothing to probe
            rows.append((float(p), "non-normalisable", oracle, ""))
            continue
        probe = boundary.sweeping_divergence_probe(K, domain, x)["verdict"]
        rows.append((float(p), probe, oracle, int(probe == oracle)))
    return ("p", "probe_verdict", "oracle_verdict", "agree"), rows, {}


def _study_alpha(cfg, values):
    rows = []
    for a in values:
        c = cfg.with_overrides(boundary={"alpha_kind": "constant", "alpha": float(a)})
        res = run_spectral_from_config(c)
        osc = validation.oscillation_report(c.boundary_operator())
        rows.append((float(a), res.eig.lam, res.eig.status, res.lam2 if res.lam2 is not None else np.nan,
                     osc["bound"], int(osc["predicate"])))
    return ("alpha", "lambda_max", "status", "subdominant_modulus", "oscillation_bound", "oscillation_predicate"), rows, {}


STUDIES = {"grid": _study_grid, "N": _study_N, "p": _study_p, "alpha": _study_alpha}


def cmd_sweep_study(args):
    cfg, tol, out = _prepare(args)
    started = _now()
    axis = args.axis or cfg["study"]["axis"]
    if axis not in STUDIES:
        raise config.ConfigError(f"unknown study axis, expected one of {tuple(STUDIES)}", key="study.axis")
    values = cfg["study"]["values"] or (cfg["grids"]["refinement_levels"] if axis == "grid" else [])
    if not values:
        raise config.ConfigError("no study values given", key="study.values")
    header, rows, extra = STUDIES[axis](cfg, values)
    io.write_csv(out / "study.csv", header, rows)
    summary = {"axis": axis, "values": list(values), **extra}
    io.write_json(out / "study.json", summary)
    io.write_manifest(out, cfg, f"sweep-study:{axis}", tol, summary, started)
    for r in rows:
        print(", ".join(io._fmt(v) for v in r))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pdtransport", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario TOML file or preset:NAME")
        sp.add_argument("--out", help="output directory (default: outputs.directory)")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--threads", type=int, help="worker threads; never changes results")

    common(sub.add_parser("validate", help="run the invariant checks for a scenario"))
    common(sub.add_parser("spectral", help="trace fixed point and invariant density"))
    sim = sub.add_parser("simulate", help="particle simulation with observables")
    common(sim)
    sim.add_argument("--psi", help="psi.csv from the spectral command (default: OUT/psi.csv)")
    st = sub.add_parser("sweep-study", help="one row of key scalars per parameter value")
    common(st)
    st.add_argument("--axis", choices=tuple(STUDIES), help="overrides study.axis")
    return p


COMMANDS = {"validate": cmd_validate, "spectral": cmd_spectral, "simulate": cmd_simulate,
            "sweep-study": cmd_sweep_study}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (config.ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except eigen.NoConvergenceWarning as exc:  # only when warnings are raised as errors
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
