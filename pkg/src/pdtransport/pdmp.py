"""Event-driven simulation of free transport with random boundary jumps.

Particles fly freely between wall hits.  At a hit the outgoing velocity is
replaced by a draw from the boundary law.  Random numbers come from keyed
streams (seed, particle, event, draw), so runs do not depend on how the
particles are split into chunks.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .boundary import PartlyDiffuseBoundary, sample_post_collision
from .rng import EventStream, uniforms
from .vmeasure import RadialSampler, VelocityMeasure, uniform_directions

RHO_FREEZE = 1e-6
EVENT_BUDGET = 1_000_000  # per particle and per call of simulate_to
INIT_EVENT = -1  # event key reserved for initial sampling


class InitialLawError(ValueError):
    pass


@dataclass
class ParticleEnsemble:
    x: np.ndarray  # position at the last event
    v: np.ndarray
    t0: np.ndarray  # time of the last event
    t_hit: np.ndarray  # time of the next wall hit
    events: np.ndarray
    frozen: np.ndarray
    seed: int
    clock: float = 0.0
    budget_frozen: int = 0
    grazing_tilted: int = 0
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.x))

    @property
    def size(self):
        return len(self.x)

    def positions(self, t=None):
        t = self.clock if t is None else t
        dt = np.where(self.frozen, 0.0, np.minimum(t, self.t_hit) - self.t0)
        return self.x + dt[:, None] * self.v

    def speeds(self):
        return np.where(self.frozen, 0.0, np.linalg.norm(self.v, axis=-1))

    def frozen_fraction(self):
        return float(self.frozen.mean())

    def copy(self):
        return ParticleEnsemble(self.x.copy(), self.v.copy(), self.t0.copy(), self.t_hit.copy(),
                                self.events.copy(), self.frozen.copy(), self.seed, self.clock,
                                self.budget_frozen, self.grazing_tilted, self.ids.copy())


# ---------------------------------------------------------------------------
# initial laws


def _uniform_positions(domain, ids, seed, first_draw=0, max_rounds=10_000):
    lo, hi = domain.bounding_box()
    d = domain.dim
    out = np.empty((len(ids), d))
    todo = np.arange(len(ids))
    tried = 0
    for r in range(max_rounds):
        if todo.size == 0:
            break
        u = np.stack([uniforms(seed, ids[todo], INIT_EVENT, first_draw + r * d + k) for k in range(d)], axis=-1)
        p = lo + u * (hi - lo)
        ok = domain.level(p) < 0
        tried += todo.size
        out[todo[ok]] = p[ok]
        todo = todo[~ok]
    if todo.size:
        raise InitialLawError("position rejection sampling did not terminate")
    return out, len(ids) / tried


def _speed_in_cells(measure, lo, hi, u):
    """Speeds drawn from m0 restricted to [lo, hi] (per particle bounds)."""
    samp = RadialSampler(measure, table_size=20001)
    a = samp.cdf_at(lo)
    b = samp.cdf_at(hi)
    return np.clip(samp(a + u * (b - a)), lo, hi)


def init_ensemble(domain: geometry.Domain, measure: VelocityMeasure, n, law="uniform", seed=0,
                  phase=None, masses=None, point=None):
    """N samples of the initial law; particle i uses keys (seed, i, INIT_EVENT, draw).

    law: ``uniform`` (dx m(dv) restricted to Omega), ``phase`` (cell masses on a
    PhaseGrid, uniform inside each cell) or ``point`` (x, v).
    """
    ids = np.arange(n)
    d = domain.dim
    info = {}
    if law == "uniform":
        x, acc = _uniform_positions(domain, ids, seed)
        info["acceptance"] = acc
        samp = RadialSampler(measure)
        sp = samp(uniforms(seed, ids, INIT_EVENT, 100_000))
        u = np.stack([uniforms(seed, ids, INIT_EVENT, 100_001 + k) for k in range(d - 1)], axis=-1)
        v = sp[:, None] * uniform_directions(d, u)
    elif law == "phase":
        if phase is None or masses is None:
            raise InitialLawError("phase law needs a PhaseGrid and cell masses")
        p = np.asarray(masses, float)
        if np.any(p < 0) or p.sum() <= 0:
            raise InitialLawError("cell masses must be nonnegative with positive total")
        cdf = np.cumsum(p) / p.sum()
        cell = np.searchsorted(cdf, uniforms(seed, ids, INIT_EVENT, 0), side="right").clip(0, len(p) - 1)
        b, k, j = phase.unravel(cell)
        x = _positions_in_boxes(domain, phase, b, ids, seed)
        sp = _speed_in_cells(measure, phase.edges[k], phase.edges[k + 1], uniforms(seed, ids, INIT_EVENT, 100_000))
        v = sp[:, None] * _directions_in_cells(phase, j, ids, seed)
    elif law == "point":
        if point is None:
            raise InitialLawError("point law needs (x, v)")
        x = np.tile(np.asarray(point[0], float), (n, 1))
        v = np.tile(np.asarray(point[1], float), (n, 1))
    else:
        raise InitialLawError(f"unsupported initial law {law!r}")
    zeros = np.zeros(n)
    ens = ParticleEnsemble(x, v, zeros.copy(), zeros.copy(), np.zeros(n, dtype=np.int64),
                           np.zeros(n, bool), int(seed))
    rho = np.linalg.norm(v, axis=-1)
    ens.frozen = rho < RHO_FREEZE
    live = ~ens.frozen
    if np.any(live):
        w = v[live] / rho[live, None]
        ens.t_hit[live] = geometry.exit_distance(domain, x[live], w) / rho[live]
    ens.t_hit[ens.frozen] = np.inf
    ens.info = info
    return ens


def _positions_in_boxes(domain, phase, b, ids, seed, max_rounds=10_000):
    d = domain.dim
    ijk = np.array(np.unravel_index(phase.box_lattice[b], phase.shape)).T
    corner = phase.lo + ijk * phase.h
    out = np.empty((len(ids), d))
    todo = np.arange(len(ids))
    for r in range(max_rounds):
        if todo.size == 0:
            break
        u = np.stack([uniforms(seed, ids[todo], INIT_EVENT, 1 + r * d + k) for k in range(d)], axis=-1)
        p = corner[todo] + u * phase.h
        ok = domain.level(p) < 0
        out[todo[ok]] = p[ok]
        todo = todo[~ok]
    if todo.size:
        raise InitialLawError("box rejection sampling did not terminate")
    return out


def _directions_in_cells(phase, j, ids, seed):
    u1 = uniforms(seed, ids, INIT_EVENT, 100_001)
    if phase.domain.dim == 2:
        na = phase.n_dir[0]
        th = 2 * np.pi * (j + u1) / na
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    nz, nphi = phase.n_dir
    iz, ip = np.divmod(j, nphi)
    u2 = uniforms(seed, ids, INIT_EVENT, 100_002)
    z = -1 + 2 * (iz + u1) / nz
    ph = 2 * np.pi * (ip + u2) / nphi
    s = np.sqrt(np.clip(1 - z * z, 0, None))
    return np.stack([s * np.cos(ph), s * np.sin(ph), z], axis=-1)


# ---------------------------------------------------------------------------
# dynamics


def _inward(domain, x, v, tol_graze):
    """Tilt reflected velocities that came out grazing so that they point inward.

    Grazing reflections only arise from hits of mu-measure zero; the tilt
    keeps the speed and makes the inward cosine 2 tol_graze.
    """
    n = geometry.normal(domain, x)
    rho = np.linalg.norm(v, axis=-1)
    c = -np.sum(v * n, axis=-1) / np.where(rho > 0, rho, 1.0)
    bad = (c <= tol_graze) & (rho > 0)
    if np.any(bad):
        t = v[bad] + (c[bad] * rho[bad])[:, None] * n[bad]  # tangential part
        tn = np.linalg.norm(t, axis=-1, keepdims=True)
        t = np.where(tn > 0, t / np.where(tn > 0, tn, 1.0), 0.0)
        s = 2 * tol_graze
        v = v.copy()
        v[bad] = rho[bad, None] * (np.sqrt(1 - s * s) * t - s * n[bad])
    return v, int(np.count_nonzero(bad))


def _advance_chunk(ens, idx, domain, H, t_end, tol_graze, budget):
    """Process all wall hits before t_end for the particles idx (in place).

    Returns (particles frozen by the event budget, grazing reflections tilted).
    """
    start_events = ens.events[idx].copy()
    over_count = 0
    tilted = 0
    act = idx[(~ens.frozen[idx]) & (ens.t_hit[idx] <= t_end)]
    while act.size:
        th = ens.t_hit[act]
        xh = ens.x[act] + (th - ens.t0[act])[:, None] * ens.v[act]
        stream = EventStream(ens.seed, ens.ids[act], ens.events[act])
        v_new, _ = sample_post_collision(H, domain, xh, ens.v[act], stream, tol_graze)
        v_new, nt = _inward(domain, xh, v_new, tol_graze)
        tilted += nt
        ens.x[act] = xh
        ens.t0[act] = th
        ens.v[act] = v_new
        ens.events[act] += 1
        rho = np.linalg.norm(v_new, axis=-1)
        slow = rho < RHO_FREEZE
        over = (ens.events[act] - start_events[np.searchsorted(idx, act)]) > budget
        freeze = slow | over
        over_count += int(np.count_nonzero(over & ~slow))
        ens.frozen[act[freeze]] = True
        ens.t_hit[act[freeze]] = np.inf
        live = act[~freeze]
        if live.size:
            r = rho[~freeze]
            w = ens.v[live] / r[:, None]
            dist = geometry.exit_distance(domain, ens.x[live], w)
            ens.t_hit[live] = ens.t0[live] + dist / r
        act = live[ens.t_hit[live] <= t_end]
    return over_count, tilted


def simulate_to(ens: ParticleEnsemble, domain, H: PartlyDiffuseBoundary, t_end, tol_graze=geometry.TOL_GRAZE,
                budget=EVENT_BUDGET, threads=1, chunk=None):
    """Advance every particle to time t_end; the particle count never changes."""
    if t_end < ens.clock:
        raise ValueError("cannot simulate backwards")
    n = ens.size
    if threads <= 1:
        counts = [_advance_chunk(ens, np.arange(n), domain, H, t_end, tol_graze, budget)]
    else:
        chunk = chunk or -(-n // threads)
        parts = [np.arange(i, min(i + chunk, n)) for i in range(0, n, chunk)]
        with ThreadPoolExecutor(threads) as pool:
            counts = list(pool.map(lambda p: _advance_chunk(ens, p, domain, H, t_end, tol_graze, budget),
                                   parts))
    ens.budget_frozen += sum(c[0] for c in counts)
    ens.grazing_tilted += sum(c[1] for c in counts)
    ens.clock = float(t_end)
    if ens.size != n:
        raise AssertionError("particle count changed")
    return ens


# ---------------------------------------------------------------------------
# observables


def empirical_masses(ens: ParticleEnsemble, phase, t=None):
    """Cell masses (fraction of particles per PhaseGrid cell) and the fraction off the grid."""
    x = ens.positions(t)
    v = np.where(ens.frozen[:, None], 0.0, ens.v)
    c = phase.locate(x, v)
    on = c >= 0
    m = np.bincount(c[on], minlength=phase.size) / ens.size
    return m, float(1.0 - on.mean())


def empirical_density(ens: ParticleEnsemble, phase, t=None):
    """Histogram masses divided by cell dx m(dv) weights."""
    m, _ = empirical_masses(ens, phase, t)
    return np.where(phase.weight > 0, m / np.where(phase.weight > 0, phase.weight, 1.0), 0.0)


def distance_from_boundary_at_least(domain, x, eps, n_dir=64):
    """dist(x, boundary) >= eps, exactly for built-in round domains, else by probing a sphere of radius eps."""
    x = np.asarray(x, float)
    dist = domain.distance_to_boundary(x)
    if dist is not None:
        return dist >= eps
    inside = domain.level(x) < 0
    if domain.dim == 2:
        th = 2 * np.pi * (np.arange(n_dir) + 0.5) / n_dir
        dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
    else:
        k = np.arange(n_dir) + 0.5
        z = 1 - 2 * k / n_dir
        ph = np.pi * (1 + 5 ** 0.5) * k
        s = np.sqrt(1 - z * z)
        dirs = np.stack([s * np.cos(ph), s * np.sin(ph), z], axis=-1)
    ok = inside.copy()
    for w in dirs:
        ok &= domain.level(x + eps * w) < 0
    return ok


def mass_in_F(ens: ParticleEnsemble, domain, eps, M, t=None):
    """Fraction of particles with eps <= |v| <= M at distance >= eps from the boundary."""
    if not eps < M:
        raise ValueError("need eps < M")
    rho = ens.speeds()
    sel = (rho >= eps) & (rho <= M)
    if not np.any(sel):
        return 0.0
    far = distance_from_boundary_at_least(domain, ens.positions(t)[sel], eps)
    return float(np.count_nonzero(far) / ens.size)


def mass_highspeed(ens: ParticleEnsemble, eps):
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return float(np.mean(ens.speeds() >= eps))


# ---------------------------------------------------------------------------
# series


SERIES_COLUMNS = ("t", "l1_to_invariant", "cesaro_l1", "mass_F", "mass_highspeed", "frozen_fraction")


@dataclass
class ObservableSeries:
    times: np.ndarray
    columns: dict
    metadata: dict

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for i, t in enumerate(self.times):
            row = [repr(float(t))]
            for c in SERIES_COLUMNS[1:]:
                val = self.columns.get(c)
                row.append("" if val is None or not np.isfinite(val[i]) else repr(float(val[i])))
            w.writerow(row)
        return buf.getvalue()


def run_observables(ens, domain, H, times, phase=None, psi_mass=None, eps=0.1, M=4.0, eps_high=0.1,
                    threads=1, keep_masses=False, tol_graze=geometry.TOL_GRAZE, budget=EVENT_BUDGET):
    """Simulate through the sample times and record the standard observables."""
    from .spectral.density import cesaro_defect
    times = np.asarray(times, float)
    cols = {c: np.full(len(times), np.nan) for c in SERIES_COLUMNS[1:]}
    masses = []
    off = []
    for i, t in enumerate(times):
        simulate_to(ens, domain, H, t, tol_graze=tol_graze, budget=budget, threads=threads)
        cols["mass_F"][i] = mass_in_F(ens, domain, eps, M)
        cols["mass_highspeed"][i] = mass_highspeed(ens, eps_high)
        cols["frozen_fraction"][i] = ens.frozen_fraction()
        if phase is not None:
            m, o = empirical_masses(ens, phase)
            masses.append(m)
            off.append(o)
    if phase is not None and psi_mass is not None:
        inst, ces = cesaro_defect(times, np.array(masses), psi_mass)
        cols["l1_to_invariant"] = inst
        cols["cesaro_l1"] = ces
    meta = {"eps": eps, "M": M, "eps_high": eps_high, "seed": ens.seed, "N": ens.size,
            "off_grid_max": float(max(off)) if off else 0.0, "budget_frozen": ens.budget_frozen}
    series = ObservableSeries(times, cols, meta)
    if keep_masses:
        series.masses = np.array(masses)
    return series
