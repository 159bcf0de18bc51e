"""Invariant checks shared by the ``validate`` command and the test suite.

Each check returns a ``Check`` with the measured value and the tolerance it
was held to.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import boundary, geometry
from .spectral import density, grids, operators


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def as_dict(self):
        return asdict(self)

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.name}: {self.value:.3g} (tol {self.tolerance:.3g}) {self.detail}".rstrip()


def random_interior(domain, n, rng):
    lo, hi = domain.bounding_box()
    out = []
    while sum(len(o) for o in out) < n:
        p = lo + rng.random((4 * n, domain.dim)) * (hi - lo)
        out.append(p[domain.level(p) < -1e-3 * domain.diameter])
    return np.concatenate(out)[:n]


def random_directions(d, n, rng):
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def non_grazing_configurations(domain, n, rng, min_cos=0.1):
    """Interior points and directions whose backward footpoint meets the wall at cosine >= min_cos."""
    xs, ws = [], []
    while sum(len(x) for x in xs) < n:
        x = random_interior(domain, 2 * n, rng)
        w = random_directions(domain.dim, 2 * n, rng)
        tau = geometry.exit_distance(domain, x, -w)
        z = x - tau[:, None] * w
        c = np.abs(np.sum(w * geometry.normal(domain, z), axis=-1))
        ok = c >= min_cos
        xs.append(x[ok])
        ws.append(w[ok])
    return np.concatenate(xs)[:n], np.concatenate(ws)[:n]


def check_round_trip(domain, n=200, seed=0):
    """tau_+(footpoint, w) equals tau_-(x, w) for outgoing boundary states."""
    rng = np.random.default_rng(seed)
    x, w = non_grazing_configurations(domain, n, rng)
    # move x to the exit point so that (x, w) is outgoing
    x = x + geometry.exit_distance(domain, x, w)[:, None] * w
    back = geometry.ballistic_flow(domain, x, w)
    fwd = geometry.exit_distance(domain, back.x, w)
    chord = geometry.exit_distance(domain, x, -w)
    err = float(np.max(np.abs(fwd - chord)) / domain.diameter)
    return Check("flow round trip", err <= 1e-10, err, 1e-10, "relative to D")


def check_disk_chord(domain, n=200, seed=0):
    """Chord length 2 x.w at outgoing points of a disk or ball centred at 0."""
    rng = np.random.default_rng(seed)
    w = random_directions(domain.dim, n, rng)
    x = domain.radius * random_directions(domain.dim, n, rng)
    x = np.where((np.sum(x * w, axis=-1) < 0)[:, None], -x, x)
    keep = np.sum(x * w, axis=-1) > 0.05 * domain.radius
    tau = geometry.exit_distance(domain, x[keep], -w[keep])
    err = float(np.max(np.abs(tau - 2 * np.sum(x[keep] * w[keep], axis=-1))))
    return Check("disk chord oracle", err <= 1e-10, err, 1e-10)


def _perp(w, rng):
    h = rng.standard_normal(w.shape)
    h -= np.sum(h * w, axis=-1, keepdims=True) * w
    return h / np.linalg.norm(h, axis=-1, keepdims=True)


def gradient_errors(domain, n=100, seed=0, step=1e-6):
    """Relative errors of the closed-form travel-time gradients against central differences."""
    rng = np.random.default_rng(seed)
    x, w = non_grazing_configurations(domain, n, rng)
    h = random_directions(domain.dim, len(x), rng)
    gx = geometry.grad_tau_x(domain, x, w, h)
    fx = (geometry.exit_distance(domain, x + step * h, -w) - geometry.exit_distance(domain, x - step * h, -w)) / (2 * step)
    hw = _perp(w, rng)

    def tau_at(s):
        ws = w + s * hw
        return geometry.exit_distance(domain, x, -ws / np.linalg.norm(ws, axis=-1, keepdims=True))

    gw = geometry.grad_tau_omega(domain, x, w, hw)
    fw = (tau_at(step) - tau_at(-step)) / (2 * step)
    scale_x = np.maximum(np.abs(fx), 1e-2)
    scale_w = np.maximum(np.abs(fw), 1e-2)
    return np.abs(gx - fx) / scale_x, np.abs(gw - fw) / scale_w


def check_gradients(domain, n=100, seed=0, tol=1e-5):
    ex, ew = gradient_errors(domain, n, seed)
    err = float(max(ex.max(), ew.max()))
    return Check("travel-time gradients", err <= tol, err, tol, f"{n} configurations")


def identity_errors(domain, measure, boxes=16, n_sub=None):
    """Relative gap between the phase-grid volume integral and the outgoing-side iterated integral."""
    edges = grids.speed_edges(measure) if measure.is_atomic else np.array([measure.rho_min, measure.rho_max])
    pg = grids.build_phase_grid(domain, measure, boxes, edges=edges, angle_cells=4, n_sub=n_sub)
    out = {}
    for power in (0.0, 1.0):
        a = density.phase_integral(pg, power)
        b = density.outgoing_iterated_integral(domain, measure, power)
        out[power] = abs(a - b) / abs(b)
    return out


def check_integration_identity(domain, measure, boxes=16, tol=1e-3):
    errs = identity_errors(domain, measure, boxes)
    err = float(max(errs.values()))
    return Check("volume vs outgoing iterated integral", err <= tol, err, tol, "h = 1 and h = |v|")


def check_stochasticity(domain, measure, H, boundary_cells=32, angle_cells=16, speed_cells=8, n_vectors=20,
                        seed=0, edges=None):
    grid = grids.build_trace_grid(domain, measure, boundary_cells, edges=edges, angle_cells=angle_cells,
                                  speed_cells=speed_cells)
    M0 = operators.assemble_M0(grid)
    Hop = operators.assemble_H(grid, H)
    col = max(operators.column_sum_error(M0), operators.column_sum_error(Hop))
    rng = np.random.default_rng(seed)
    rel = 0.0
    for _ in range(n_vectors):
        u = rng.random(grid.size)
        rel = max(rel, abs(M0.matvec(u).sum() - u.sum()) / u.sum())
    return [Check("operator column sums", col <= 1e-12, col, 1e-12),
            Check("boundary mass preserved by M0", rel <= 1e-10, float(rel), 1e-10, f"{n_vectors} vectors")]


def check_rank_one(n=1000, seed=0, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        d = 2 + k % 4
        c = rng.uniform(0.2, 2.0)
        a = rng.standard_normal(d)
        u = rng.standard_normal(d)
        dense = np.linalg.det(c * np.eye(d) + np.outer(a, u))
        closed = geometry.det_rank_one_update(c, a, u)
        worst = max(worst, abs(closed - dense) / max(abs(dense), 1e-300))
    return Check("rank-one determinant", worst <= tol, float(worst), tol, f"{n} instances")


def oscillation_report(H: boundary.PartlyDiffuseBoundary):
    """Predicate and bound for beta = 1 - alpha (a sufficient condition, never a failure)."""
    beta = 1.0 - np.asarray(H.alpha.all_values(), float)
    return boundary.oscillation_predicate(beta)


def scenario_checks(domain, measure, H, trace_edges=None):
    checks = [check_round_trip(domain)]
    if isinstance(domain, geometry.Disk):
        checks.append(check_disk_chord(domain))
    checks.append(check_gradients(domain, n=50))
    checks.append(check_integration_identity(domain, measure))
    checks.extend(check_stochasticity(domain, measure, H, edges=trace_edges))
    checks.append(check_rank_one(200))
    return checks
