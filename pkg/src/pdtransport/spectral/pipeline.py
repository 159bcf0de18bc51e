"""End-to-end spectral solve: grids, operators, fixed point, lift to a phase density."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import density, eigen, grids, operators


@dataclass
class GridSpec:
    boundary_cells: int = 128
    angle_cells: int = 64
    speed_cells: int = 16
    spacing: str = "uniform"
    q: int = operators.DEFAULT_SUBSAMPLES
    # observation (phase) grid
    phase_boxes: int = 4
    phase_speed_cells: int = 4
    phase_angle_cells: int = 4
    q_x: int = 4
    q_dir: int = 4
    q_speed: int = 8
    # additional condition
    condition_boundary_cells: int = 32
    condition_angle_cells: int = 16
    floors: tuple = ()


@dataclass
class SpectralResult:
    trace: grids.TraceGrid
    M0: operators.TraceOperator
    H: operators.TraceOperator
    eig: eigen.EigenResult
    irreducible: bool
    n_components: int
    lam2: float | None
    condition: dict
    psi: density.PhaseDensity | None
    phase: grids.PhaseGrid
    notes: list = field(default_factory=list)

    def summary(self):
        s = {
            "lambda_max": self.eig.lam,
            "residual": self.eig.residual,
            "iterations": self.eig.iterations,
            "status": self.eig.status,
            "irreducible": bool(self.irreducible),
            "components": int(self.n_components),
            "fixed_point_label": self.eig.label,
            "subdominant_modulus": self.lam2,
            "M0_column_error": operators.column_sum_error(self.M0),
            "H_column_error": operators.column_sum_error(self.H),
            "redirected": float(self.M0.geometry.redirected),
            "condition_verdict": self.condition["verdict"],
            "condition_floors": [float(f) for f in self.condition["floors"]],
            "condition_values": [float(v) for v in self.condition["values"]],
            "psi_present": self.psi is not None,
            "notes": list(self.notes),
        }
        if self.eig.status == "no-convergence":
            s["oscillation_diagnostic"] = self.eig.oscillation_diagnostic()
        if self.psi is not None:
            s["psi_raw_mass"] = self.psi.raw_mass
            s["psi_redirected"] = self.psi.redirected
        return s


def default_floors(measure):
    """Speed floors for the additional condition, approaching the bottom of the speed range."""
    if measure.is_atomic:
        return ()
    if measure.rho_min > 0:
        return tuple(measure.rho_min * (1.0 + 2.0 ** -np.arange(2.0, 11.0, 2.0)))
    return tuple(2.0 ** -np.arange(2.0, 15.0, 3.0))


def trace_edges(measure, spec: GridSpec, floor=None):
    if measure.is_atomic:
        return grids.speed_edges(measure)
    if floor is None and measure.rho_min <= 0:
        floor = min(default_floors(measure))
    return grids.speed_edges(measure, spec.speed_cells, spacing=spec.spacing, low=floor)


def condition_check(domain, measure, H, spec: GridSpec):
    floors = spec.floors or default_floors(measure)
    if not floors:
        return {"verdict": "finite", "floors": [], "values": []}

    def solve_at(floor):
        g = grids.build_trace_grid(domain, measure, spec.condition_boundary_cells,
                                   edges=trace_edges(measure, spec, floor),
                                   angle_cells=spec.condition_angle_cells)
        op = operators.assemble_M0(g, spec.q) @ operators.assemble_H(g, H)
        res = eigen.leading_eigenpair(op)
        return g, res.phi

    return eigen.additional_condition(solve_at, floors)


def observation_grid(domain, measure, spec: GridSpec):
    if measure.is_atomic:
        edges = grids.speed_edges(measure)
    else:
        edges = trace_edges(measure, GridSpec(speed_cells=spec.phase_speed_cells, spacing=spec.spacing))
    return grids.build_phase_grid(domain, measure, spec.phase_boxes, edges=edges,
                                  angle_cells=spec.phase_angle_cells)


def run_spectral(domain, measure, H, spec: GridSpec = None, max_iter=eigen.POWER_MAX_ITER,
                 tol=eigen.POWER_TOL, subdominant=True):
    spec = spec or GridSpec()
    tg = grids.build_trace_grid(domain, measure, spec.boundary_cells, edges=trace_edges(measure, spec),
                                angle_cells=spec.angle_cells)
    M0 = operators.assemble_M0(tg, spec.q)
    Hop = operators.assemble_H(tg, H)
    irr, ncomp = operators.is_irreducible(M0, Hop)
    op = M0 @ Hop
    eig = eigen.leading_eigenpair(op, tol=tol, max_iter=max_iter, irreducible=irr)
    notes = []
    if not irr and eig.converged:
        # without irreducibility the uniform start may sit on one of several fixed points
        alt = eigen.leading_eigenpair(op, tol=tol, max_iter=max_iter, x0=eigen.generic_start(op.shape[0]),
                                      irreducible=irr)
        if not alt.converged:
            eig = alt
        elif np.abs(alt.phi - eig.phi).sum() > 1e-6:
            notes.append("multiple fixed points")
    lam2 = eigen.subdominant_modulus(op, eig.phi) if subdominant and eig.converged else None
    cond = condition_check(domain, measure, H, spec)
    pg = observation_grid(domain, measure, spec)
    psi = None
    if cond["verdict"] == "finite" and eig.converged:
        psi = density.build_invariant_density(eig.phi, tg, Hop, pg, q_x=spec.q_x, q_dir=spec.q_dir,
                                              q_speed=spec.q_speed)
    elif cond["verdict"] != "finite":
        notes.append("no invariant density certificate")
    else:
        notes.append("fixed point not converged")
    return SpectralResult(tg, M0, Hop, eig, irr, ncomp, lam2, cond, psi, pg, notes)


def sup_cell_error(a, b):
    """max |a - b| over cells relative to max |b|."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))
