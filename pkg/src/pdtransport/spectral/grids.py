"""Cell grids on the boundary trace spaces and on phase space.

Trace cells are products (boundary cell) x (speed cell) x (local direction
cell).  Local directions are measured from the normal: in d=2 by the signed
angle psi in (-pi/2, pi/2); in d=3 by s = sin^2 of the polar angle and the
azimuth phi in the tangent frame.  The same index set serves the outgoing
and the incoming sides; only the sign of the normal component differs.

Cell index ordering is ``(boundary, speed, direction)`` with direction fastest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import geometry
from ..vmeasure import RadialSampler, VelocityMeasure, half_sphere_flux

OUT = 1
IN = -1


def speed_edges(measure: VelocityMeasure, n_cells=16, spacing="uniform", low=None, extra_octaves=0):
    """Speed cell edges.  ``extra_octaves`` adds cells [low/2^k, low/2^(k-1)) below ``low``."""
    if measure.is_atomic:
        r = np.sort(np.array([r for r, _ in measure.atoms]))
        mids = 0.5 * (r[1:] + r[:-1])
        return np.concatenate([[0.5 * r[0]], mids, [1.5 * r[-1]]])
    lo = measure.rho_min if low is None else max(low, measure.rho_min)
    if lo <= 0:
        raise ValueError("a speed floor is needed when the measure reaches zero speed")
    hi = measure.rho_max
    if spacing == "uniform":
        e = np.linspace(lo, hi, n_cells + 1)
    elif spacing == "geometric":
        e = np.geomspace(lo, hi, n_cells + 1)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    if extra_octaves:
        below = lo * 2.0 ** -np.arange(extra_octaves, 0, -1)
        below = below[below >= measure.rho_min]
        e = np.concatenate([below, e])
    return e


def speed_cell_moments(measure: VelocityMeasure, edges, power):
    """int over each cell [e_k, e_k+1) of rho^power m0(drho); atoms assigned to their cell."""
    edges = np.asarray(edges, float)
    if measure.is_atomic:
        out = np.zeros(len(edges) - 1)
        for r, m in measure.atoms:
            k = np.searchsorted(edges, r, side="right") - 1
            if 0 <= k < len(out):
                out[k] += m * r ** power
        return out
    return np.array([measure.speed_moment(a, b, power) for a, b in zip(edges[:-1], edges[1:])])


def speed_quantiles(measure: VelocityMeasure, lo, hi, q, flux=False):
    """q speeds at the midpoint quantiles of m0 (or of rho m0) restricted to [lo, hi]."""
    if measure.is_atomic:
        r = np.array([r for r, _ in measure.atoms])
        r = r[(r >= lo) & (r < hi)]
        return np.repeat(r[:1], q) if r.size else np.full(q, 0.5 * (lo + hi))
    samp = RadialSampler(measure, (lambda t: t) if flux else None, lo=lo, hi=hi, table_size=2001)
    return samp((np.arange(q) + 0.5) / q)


# ---------------------------------------------------------------------------
# trace grid


@dataclass
class TraceGrid:
    domain: geometry.Domain
    measure: VelocityMeasure
    chart_id: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    x_c: np.ndarray
    area: np.ndarray
    edges: np.ndarray
    dir_edges: tuple
    speed_flux: np.ndarray = field(init=False)
    speed_rep: np.ndarray = field(init=False)
    dir_flux: np.ndarray = field(init=False)
    mu: np.ndarray = field(init=False)

    def __post_init__(self):
        m = self.measure
        self.n_c, self.frame_c = geometry.tangent_frame(self.domain, self.x_c)
        m1 = speed_cell_moments(m, self.edges, 1.0)
        m2 = speed_cell_moments(m, self.edges, 2.0)
        self.speed_flux = m1 / m.sphere
        self.speed_rep = np.where(m1 > 0, m2 / np.where(m1 > 0, m1, 1.0), 0.5 * (self.edges[1:] + self.edges[:-1]))
        self.inv_speed_mean = np.where(m1 > 0, speed_cell_moments(m, self.edges, 0.0) / np.where(m1 > 0, m1, 1.0), 0.0)
        # speed whose flight time is the mu-average flight time of the cell
        self.flight_speed = np.where(self.inv_speed_mean > 0, 1.0 / np.where(self.inv_speed_mean > 0,
                                                                            self.inv_speed_mean, 1.0), 0.0)
        self.dir_flux, self.dir_rep = _local_direction_cells(self.domain.dim, self.dir_edges)
        self.mu = (self.area[:, None, None] * self.speed_flux[None, :, None]
                   * self.dir_flux[None, None, :]).ravel()

    # sizes -----------------------------------------------------------------
    @property
    def nb(self):
        return len(self.area)

    @property
    def ns(self):
        return len(self.edges) - 1

    @property
    def nd(self):
        return len(self.dir_flux)

    @property
    def n_vel(self):
        return self.ns * self.nd

    @property
    def size(self):
        return self.nb * self.ns * self.nd

    def index(self, b, k, j):
        return (np.asarray(b) * self.ns + np.asarray(k)) * self.nd + np.asarray(j)

    def unravel(self, c):
        c = np.asarray(c)
        return c // (self.ns * self.nd), (c // self.nd) % self.ns, c % self.nd

    # local <-> global directions -------------------------------------------
    def direction(self, side, n, frame, loc):
        """Global unit direction from local coordinates (cos, t1[, t2])."""
        w = side * loc[..., 0:1] * n
        for k in range(self.domain.dim - 1):
            w = w + loc[..., k + 1:k + 2] * frame[..., k, :]
        return w

    def local(self, side, n, frame, w):
        w = w / np.linalg.norm(w, axis=-1, keepdims=True)
        c = side * np.sum(w * n, axis=-1)
        t = np.stack([np.sum(w * frame[..., k, :], axis=-1) for k in range(self.domain.dim - 1)], axis=-1)
        return c, t

    def direction_index(self, side, n, frame, w):
        c, t = self.local(side, n, frame, w)
        if self.domain.dim == 2:
            psi = np.arctan2(t[..., 0], c)
            e = self.dir_edges[0]
            j = np.searchsorted(e, psi, side="right") - 1
            return np.clip(j, 0, len(e) - 2), (c <= 0)
        s_e, p_e = self.dir_edges
        s = np.clip(t[..., 0] ** 2 + t[..., 1] ** 2, 0.0, 1.0)
        ph = np.mod(np.arctan2(t[..., 1], t[..., 0]), 2 * np.pi)
        js = np.clip(np.searchsorted(s_e, s, side="right") - 1, 0, len(s_e) - 2)
        jp = np.clip(np.searchsorted(p_e, ph, side="right") - 1, 0, len(p_e) - 2)
        return js * (len(p_e) - 1) + jp, (c <= 0)

    def boundary_index(self, x):
        chart, u = self.domain.locate(x)
        return self._cell_of(chart, u)

    def _cell_of(self, chart, u):
        return self._locator(chart, u)

    def speed_index(self, rho):
        k = np.searchsorted(self.edges, rho, side="right") - 1
        return np.where((k >= 0) & (k < self.ns), k, -1)

    def locate(self, side, x, v):
        """Cell index of (x, v) on the given side; -1 when the speed is off the grid."""
        x = np.atleast_2d(np.asarray(x, float))
        v = np.atleast_2d(np.asarray(v, float))
        b = self.boundary_index(x)
        n, frame = geometry.tangent_frame(self.domain, x)
        j, _ = self.direction_index(side, n, frame, v)
        k = self.speed_index(np.linalg.norm(v, axis=-1))
        return np.where(k >= 0, self.index(b, np.maximum(k, 0), j), -1)

    # representatives -------------------------------------------------------
    def rep_velocity(self, side, b, k, j):
        loc = self.dir_rep[j]
        w = self.direction(side, self.n_c[b], self.frame_c[b], loc)
        return self.speed_rep[k][..., None] * w

    def subsamples(self, q):
        """Sub-sample points of every (boundary cell, direction cell) pair.

        Returns positions z (nb, nd, S, d), local direction coordinates
        loc (nd, S, d), and weights (nb, nd, S) summing to one over S.
        """
        d = self.domain.dim
        # boundary parameter sub-points
        g = (np.arange(q) + 0.5) / q
        if d == 2:
            uu = self.u_lo[:, None, :] + (self.u_hi - self.u_lo)[:, None, :] * g[None, :, None]
        else:
            g1, g2 = np.meshgrid(g, g, indexing="ij")
            gg = np.stack([g1.ravel(), g2.ravel()], axis=-1)
            uu = self.u_lo[:, None, :] + (self.u_hi - self.u_lo)[:, None, :] * gg[None, :, :]
        z = np.empty(uu.shape[:2] + (d,))
        wa = np.empty(uu.shape[:2])
        charts = self.domain.charts()
        for ci, ch in enumerate(charts):
            sel = self.chart_id == ci
            z[sel] = ch.point(uu[sel])
            wa[sel] = ch.area_element(uu[sel])
        wa = wa / wa.sum(axis=1, keepdims=True)
        loc, wl = _local_subsamples(d, self.dir_edges, q)
        # combine: S = (boundary sub) x (direction sub)
        nbs = z.shape[1]
        nds = loc.shape[1]
        zz = np.broadcast_to(z[:, None, :, None, :], (self.nb, self.nd, nbs, nds, d)).reshape(self.nb, self.nd, -1, d)
        ll = np.broadcast_to(loc[:, None, :, :], (self.nd, nbs, nds, d)).reshape(self.nd, -1, d)
        ww = (wa[:, None, :, None] * wl[None, :, None, :]).reshape(self.nb, self.nd, -1)
        return zz, ll, ww

    def describe(self):
        return {"boundary_cells": self.nb, "speed_cells": self.ns, "direction_cells": self.nd,
                "size": self.size}


def _local_direction_cells(dim, dir_edges):
    """Flux weights int |w.n| sigma(dw) and representative local coordinates per cell."""
    if dim == 2:
        e = dir_edges[0]
        flux = np.sin(e[1:]) - np.sin(e[:-1])
        psi = 0.5 * (e[1:] + e[:-1])
        return flux, np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    s_e, p_e = dir_edges
    ds = np.diff(s_e)
    dp = np.diff(p_e)
    flux = 0.5 * (ds[:, None] * dp[None, :]).ravel()
    s = 0.5 * (s_e[1:] + s_e[:-1])
    p = 0.5 * (p_e[1:] + p_e[:-1])
    S, P = np.meshgrid(s, p, indexing="ij")
    rep = np.stack([np.sqrt(1 - S), np.sqrt(S) * np.cos(P), np.sqrt(S) * np.sin(P)], axis=-1).reshape(-1, 3)
    return flux, rep


def _local_subsamples(dim, dir_edges, q):
    """Sub-directions of every local cell with flux weights normalised per cell."""
    g = (np.arange(q) + 0.5) / q
    if dim == 2:
        e = dir_edges[0]
        a, b = e[:-1, None], e[1:, None]
        lo = a + (b - a) * np.arange(q)[None, :] / q
        hi = a + (b - a) * (np.arange(q)[None, :] + 1) / q
        psi = 0.5 * (lo + hi)
        w = np.sin(hi) - np.sin(lo)
        loc = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
        return loc, w / w.sum(axis=1, keepdims=True)
    s_e, p_e = dir_edges
    ns, npz = len(s_e) - 1, len(p_e) - 1
    s = s_e[:-1, None] + np.diff(s_e)[:, None] * g[None, :]
    p = p_e[:-1, None] + np.diff(p_e)[:, None] * g[None, :]
    S = np.broadcast_to(s[:, None, :, None], (ns, npz, q, q))
    P = np.broadcast_to(p[None, :, None, :], (ns, npz, q, q))
    loc = np.stack([np.sqrt(1 - S), np.sqrt(S) * np.cos(P), np.sqrt(S) * np.sin(P)], axis=-1)
    loc = loc.reshape(ns * npz, q * q, 3)
    w = np.full((ns * npz, q * q), 1.0 / (q * q))  # uniform in (s, phi) is uniform in flux
    return loc, w


def build_trace_grid(domain: geometry.Domain, measure: VelocityMeasure, boundary_cells=128,
                     edges=None, angle_cells=64, speed_cells=16, polar_cells=None):
    """Trace grid with boundary cells spread over the charts in proportion to their size."""
    if measure.dim != domain.dim:
        raise ValueError("measure and domain dimensions differ")
    d = domain.dim
    if edges is None:
        edges = speed_edges(measure, speed_cells)
    charts = domain.charts()
    sizes = np.array([ch.measure(np.zeros((1, d - 1)), np.ones((1, d - 1)), order=64)[0] for ch in charts])
    chart_id, lo, hi = [], [], []
    if d == 2:
        counts = np.maximum(1, np.round(boundary_cells * sizes / sizes.sum()).astype(int))
        for ci, c in enumerate(counts):
            e = np.linspace(0.0, 1.0, c + 1)
            chart_id += [ci] * c
            lo.append(e[:-1, None])
            hi.append(e[1:, None])
        locator_counts = counts
    else:
        # boundary_cells is the number of cells per unit-sphere chart, split 1:2 in (z, phi)
        counts = []
        for ci, ch in enumerate(charts):
            scale = sizes[ci] / sizes.max()
            n1 = max(2, int(round(math.sqrt(boundary_cells * scale / 2.0))))
            n2 = 2 * n1
            e1 = np.linspace(0, 1, n1 + 1)
            e2 = np.linspace(0, 1, n2 + 1)
            L1, L2 = np.meshgrid(e1[:-1], e2[:-1], indexing="ij")
            H1, H2 = np.meshgrid(e1[1:], e2[1:], indexing="ij")
            chart_id += [ci] * (n1 * n2)
            lo.append(np.stack([L1.ravel(), L2.ravel()], axis=-1))
            hi.append(np.stack([H1.ravel(), H2.ravel()], axis=-1))
            counts.append((n1, n2))
        locator_counts = counts
    chart_id = np.array(chart_id)
    lo = np.concatenate(lo)
    hi = np.concatenate(hi)
    area = np.zeros(len(chart_id))
    x_c = np.zeros((len(chart_id), d))
    for ci, ch in enumerate(charts):
        sel = chart_id == ci
        area[sel] = ch.measure(lo[sel], hi[sel])
        x_c[sel] = ch.point(0.5 * (lo[sel] + hi[sel]))
    if d == 2:
        dir_edges = (np.linspace(-np.pi / 2, np.pi / 2, angle_cells + 1),)
    else:
        npol = polar_cells or max(2, angle_cells // 4)
        naz = max(4, angle_cells // npol)
        dir_edges = (np.linspace(0.0, 1.0, npol + 1), np.linspace(0.0, 2 * np.pi, naz + 1))
    grid = TraceGrid(domain, measure, chart_id, lo, hi, x_c, area, np.asarray(edges, float), dir_edges)
    offsets = np.concatenate([[0], np.cumsum([c if d == 2 else c[0] * c[1] for c in locator_counts])])

    def locator(chart, u):
        chart = np.asarray(chart)
        out = np.zeros(chart.shape, dtype=np.int64)
        for ci, c in enumerate(locator_counts):
            sel = chart == ci
            if not np.any(sel):
                continue
            if d == 2:
                out[sel] = offsets[ci] + np.clip((u[sel, 0] * c).astype(np.int64), 0, c - 1)
            else:
                n1, n2 = c
                i1 = np.clip((u[sel, 0] * n1).astype(np.int64), 0, n1 - 1)
                i2 = np.clip((u[sel, 1] * n2).astype(np.int64), 0, n2 - 1)
                out[sel] = offsets[ci] + i1 * n2 + i2
        return out

    grid._locator = locator
    return grid


# ---------------------------------------------------------------------------
# phase grid


@dataclass
class PhaseGrid:
    domain: geometry.Domain
    measure: VelocityMeasure
    lo: np.ndarray
    h: np.ndarray
    shape: tuple
    box_ids: np.ndarray  # flat lattice index -> box id or -1
    box_lattice: np.ndarray  # box id -> flat lattice index
    volume: np.ndarray
    centroid: np.ndarray
    inside_points: list
    edges: np.ndarray
    n_dir: tuple

    def __post_init__(self):
        m = self.measure
        self.speed_mass = speed_cell_moments(m, self.edges, 0.0)
        m1 = speed_cell_moments(m, self.edges, 1.0)
        self.speed_rep = np.where(self.speed_mass > 0, m1 / np.where(self.speed_mass > 0, self.speed_mass, 1.0),
                                  0.5 * (self.edges[1:] + self.edges[:-1]))
        d = self.domain.dim
        if d == 2:
            na = self.n_dir[0]
            self.dir_frac = np.full(na, 1.0 / na)
            th = 2 * np.pi * (np.arange(na) + 0.5) / na
            self.dir_rep = np.stack([np.cos(th), np.sin(th)], axis=-1)
        else:
            nz, nphi = self.n_dir
            self.dir_frac = np.full(nz * nphi, 1.0 / (nz * nphi))
            z = -1 + 2 * (np.arange(nz) + 0.5) / nz
            ph = 2 * np.pi * (np.arange(nphi) + 0.5) / nphi
            Z, P = np.meshgrid(z, ph, indexing="ij")
            s = np.sqrt(1 - Z ** 2)
            self.dir_rep = np.stack([s * np.cos(P), s * np.sin(P), Z], axis=-1).reshape(-1, 3)
        self.weight = (self.volume[:, None, None] * self.speed_mass[None, :, None]
                       * self.dir_frac[None, None, :]).ravel()

    @property
    def nbox(self):
        return len(self.volume)

    @property
    def ns(self):
        return len(self.edges) - 1

    @property
    def nd(self):
        return len(self.dir_frac)

    @property
    def size(self):
        return self.nbox * self.ns * self.nd

    def index(self, b, k, j):
        return (np.asarray(b) * self.ns + np.asarray(k)) * self.nd + np.asarray(j)

    def unravel(self, c):
        c = np.asarray(c)
        return c // (self.ns * self.nd), (c // self.nd) % self.ns, c % self.nd

    def box_index(self, x):
        x = np.asarray(x, float)
        ijk = np.floor((x - self.lo) / self.h).astype(np.int64)
        ok = np.all((ijk >= 0) & (ijk < np.array(self.shape)), axis=-1)
        flat = np.ravel_multi_index(tuple(np.clip(ijk, 0, np.array(self.shape) - 1).T), self.shape)
        return np.where(ok, self.box_ids[flat], -1)

    def direction_index(self, w):
        w = np.asarray(w, float)
        if self.domain.dim == 2:
            na = self.n_dir[0]
            th = np.mod(np.arctan2(w[..., 1], w[..., 0]), 2 * np.pi)
            return np.minimum((th / (2 * np.pi) * na).astype(np.int64), na - 1)
        nz, nphi = self.n_dir
        z = w[..., 2] / np.linalg.norm(w, axis=-1)
        iz = np.clip(((z + 1) / 2 * nz).astype(np.int64), 0, nz - 1)
        ph = np.mod(np.arctan2(w[..., 1], w[..., 0]), 2 * np.pi)
        ip = np.minimum((ph / (2 * np.pi) * nphi).astype(np.int64), nphi - 1)
        return iz * nphi + ip

    def speed_index(self, rho):
        k = np.searchsorted(self.edges, rho, side="right") - 1
        return np.where((k >= 0) & (k < self.ns), k, -1)

    def locate(self, x, v):
        v = np.asarray(v, float)
        b = self.box_index(x)
        rho = np.linalg.norm(v, axis=-1)
        k = self.speed_index(rho)
        j = self.direction_index(v)
        return np.where((b >= 0) & (k >= 0), self.index(np.maximum(b, 0), np.maximum(k, 0), j), -1)

    def total_weight(self):
        return float(self.weight.sum())

    def direction_subsamples(self, q):
        """q^(d-1) unit vectors per direction cell with equal weights, shape (nd, S, d)."""
        g = (np.arange(q) + 0.5) / q
        if self.domain.dim == 2:
            na = self.n_dir[0]
            th = 2 * np.pi * (np.arange(na)[:, None] + g[None, :]) / na
            return np.stack([np.cos(th), np.sin(th)], axis=-1)
        nz, nphi = self.n_dir
        z = -1 + 2 * (np.arange(nz)[:, None] + g[None, :]) / nz
        ph = 2 * np.pi * (np.arange(nphi)[:, None] + g[None, :]) / nphi
        Z = np.broadcast_to(z[:, None, :, None], (nz, nphi, q, q))
        P = np.broadcast_to(ph[None, :, None, :], (nz, nphi, q, q))
        s = np.sqrt(1 - Z ** 2)
        out = np.stack([s * np.cos(P), s * np.sin(P), Z], axis=-1)
        return out.reshape(nz * nphi, q * q, 3)

    def position_subsamples(self, q):
        """Stratified positions per box: centroid of the inside points of each of q^d sub-boxes.

        Returns a list of (points, weights) with weights summing to one per
        box.  Sub-boxes fully inside give their centres, so the pattern is the
        same in every interior box.
        """
        d = self.domain.dim
        out = []
        for bid, pts in enumerate(self.inside_points):
            ijk = np.array(np.unravel_index(self.box_lattice[bid], self.shape))
            corner = self.lo + ijk * self.h
            sub = np.clip(np.floor((pts - corner) / self.h * q).astype(np.int64), 0, q - 1)
            key = np.ravel_multi_index(tuple(sub.T), (q,) * d)
            cnt = np.bincount(key, minlength=q ** d)
            sums = np.stack([np.bincount(key, weights=pts[:, i], minlength=q ** d) for i in range(d)], axis=-1)
            ok = cnt > 0
            out.append((sums[ok] / cnt[ok, None], cnt[ok] / cnt.sum()))
        return out

    def same_layout(self, other):
        return (self.size == other.size and np.allclose(self.edges, other.edges)
                and self.n_dir == other.n_dir and self.shape == other.shape)

    def describe(self):
        return {"boxes": self.nbox, "lattice": list(self.shape), "speed_cells": self.ns,
                "direction_cells": self.nd, "size": self.size}


def build_phase_grid(domain: geometry.Domain, measure: VelocityMeasure, boxes=16, edges=None,
                     angle_cells=64, speed_cells=16, n_sub=None, polar_cells=None):
    """Boxes of a regular lattice clipped to the domain, with volumes by midpoint sub-sampling."""
    d = domain.dim
    if edges is None:
        edges = speed_edges(measure, speed_cells)
    blo, bhi = domain.bounding_box()
    shape = (boxes,) * d
    h = (bhi - blo) / boxes
    lo = blo.copy()
    if n_sub is None:
        n_sub = 64 if d == 2 else 16
    g = (np.arange(n_sub) + 0.5) / n_sub
    offs = np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)
    box_ids = np.full(int(np.prod(shape)), -1, dtype=np.int64)
    vols, cents, inside, lattice = [], [], [], []
    cell_vol = float(np.prod(h))
    for flat in range(int(np.prod(shape))):
        ijk = np.array(np.unravel_index(flat, shape))
        corner = lo + ijk * h
        pts = corner + offs * h
        inn = domain.level(pts) < 0
        if not np.any(inn):
            continue
        box_ids[flat] = len(vols)
        lattice.append(flat)
        frac = inn.mean()
        vols.append(frac * cell_vol)
        p_in = pts[inn]
        cents.append(p_in.mean(axis=0))
        inside.append(p_in)
    if d == 2 and hasattr(domain, "volume"):
        pass
    grid = PhaseGrid(domain, measure, lo, h, shape, box_ids, np.array(lattice), np.array(vols),
                     np.array(cents), inside, np.asarray(edges, float),
                     (angle_cells,) if d == 2 else ((polar_cells or max(2, angle_cells // 4)),
                                                    max(4, angle_cells // (polar_cells or max(2, angle_cells // 4)))))
    return grid
