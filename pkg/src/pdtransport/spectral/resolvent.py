"""Resolvent of the transport generator with boundary operator H.

R(lam) f = R_lam f + sum_n Xi_lam H (M_lam H)^n G_lam f, assembled as mass
transport: sub-sampled rays are cut exactly at the phase-box faces, and each
segment [s_a, s_b] of a ray at speed rho receives the weight
(exp(-lam s_a/rho) - exp(-lam s_b/rho)) / lam.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .. import geometry
from .grids import IN, OUT, PhaseGrid, TraceGrid
from .operators import TraceOperator, TransferGeometry, assemble_M_lambda, transfer_geometry

SERIES_TOL = 1e-10
SLOW_TERMS = 10_000


class SlowConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class Segments:
    ray: np.ndarray
    box: np.ndarray
    s_a: np.ndarray
    s_b: np.ndarray


def ray_segments(pgrid: PhaseGrid, x, w, length):
    """Cut rays x + s w, 0 <= s <= length, at the lattice faces; keep pieces inside phase boxes."""
    x = np.asarray(x, float)
    w = np.asarray(w, float)
    R, d = x.shape
    cuts = [np.zeros((R, 1)), length[:, None]]
    for i in range(d):
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (x[:, i] - pgrid.lo[i]) / pgrid.h[i]
            b = (x[:, i] + length * w[:, i] - pgrid.lo[i]) / pgrid.h[i]
        lo = np.ceil(np.minimum(a, b))
        hi = np.floor(np.maximum(a, b))
        m = int(np.max(hi - lo)) + 1 if R else 0
        k = lo[:, None] + np.arange(max(m, 0))[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (pgrid.lo[i] + k * pgrid.h[i] - x[:, i:i + 1]) / w[:, i:i + 1]
        s = np.where((k <= hi[:, None]) & np.isfinite(s) & (s > 0) & (s < length[:, None]), s, np.nan)
        cuts.append(s)
    S = np.sort(np.concatenate(cuts, axis=1), axis=1)  # NaNs sort last
    sa = S[:, :-1]
    sb = S[:, 1:]
    ok = np.isfinite(sa) & np.isfinite(sb) & (sb > sa)
    ray = np.broadcast_to(np.arange(R)[:, None], sa.shape)[ok]
    sa = sa[ok]
    sb = sb[ok]
    mid = x[ray] + (0.5 * (sa + sb))[:, None] * w[ray]
    box = pgrid.box_index(mid)
    keep = box >= 0
    return Segments(ray[keep], box[keep], sa[keep], sb[keep])


@dataclass
class RaySet:
    """Sub-sampled rays of the phase cells, traced both ways."""

    box: np.ndarray  # source box
    dir: np.ndarray  # phase direction cell
    weight: np.ndarray  # share of the source cell
    length: np.ndarray  # forward distance to the boundary
    exit_b: np.ndarray
    exit_j: np.ndarray
    back_length: np.ndarray  # backward distance to the footpoint
    foot_b: np.ndarray
    foot_j: np.ndarray
    back: Segments  # backward ray cut by the phase boxes


def phase_rays(pgrid: PhaseGrid, tgrid: TraceGrid, q_x=2, q_dir=2):
    """Rays from q_x^d stratified positions x q_dir^(d-1) directions per phase (box, direction) cell."""
    d = pgrid.domain.dim
    pos = pgrid.position_subsamples(q_x)
    dirs = pgrid.direction_subsamples(q_dir)
    nd, Q = dirs.shape[:2]
    X, W, B, J, WT = [], [], [], [], []
    for bx, (P, pw) in enumerate(pos):
        X.append(np.broadcast_to(P[:, None, None, :], (len(P), nd, Q, d)).reshape(-1, d))
        W.append(np.broadcast_to(dirs[None], (len(P), nd, Q, d)).reshape(-1, d))
        B.append(np.full(len(P) * nd * Q, bx))
        J.append(np.broadcast_to(np.arange(nd)[None, :, None], (len(P), nd, Q)).ravel())
        WT.append(np.broadcast_to(pw[:, None, None] / Q, (len(P), nd, Q)).ravel())
    X = np.concatenate(X)
    W = np.concatenate(W)
    length = geometry.exit_distance(pgrid.domain, X, W)
    xe = X + length[:, None] * W
    b_out = tgrid.boundary_index(xe)
    n, fr = geometry.tangent_frame(tgrid.domain, xe)
    j_out, _ = tgrid.direction_index(OUT, n, fr, W)
    back = geometry.exit_distance(pgrid.domain, X, -W)
    z = X - back[:, None] * W
    b_in = tgrid.boundary_index(z)
    n, fr = geometry.tangent_frame(tgrid.domain, z)
    j_in, _ = tgrid.direction_index(IN, n, fr, W)
    seg = ray_segments(pgrid, X, -W, back)
    return RaySet(np.concatenate(B), np.concatenate(J), np.concatenate(WT), length, b_out, j_out,
                  back, b_in, j_in, seg)


def _forward_rays(pgrid, tgrid, geo, select):
    """Forward rays of the trace sub-samples whose (boundary, direction) pair is selected."""
    if not np.any(select):
        return None
    z, loc, w = tgrid.subsamples(geo.q)
    nb, nd, S, d = z.shape
    keep = select[geo.src]
    zz = z.reshape(-1, d)[keep]
    n, fr = geometry.tangent_frame(tgrid.domain, zz)
    ll = np.broadcast_to(loc[None], (nb, nd, S, d)).reshape(-1, d)[keep]
    omega = tgrid.direction(IN, n, fr, ll)
    seg = ray_segments(pgrid, zz, omega, geo.length[keep])
    return {"src": geo.src[keep], "weight": geo.weight[keep], "dir": pgrid.direction_index(omega), "seg": seg}


def _decay(lam, s, rho):
    return np.exp(-lam * s / rho)


def _rescale_columns(mat, target):
    """Scale columns so that their sums equal ``target`` (mass bookkeeping made exact)."""
    cs = np.asarray(mat.sum(axis=0)).ravel()
    scale = np.where(cs > 0, target / np.where(cs > 0, cs, 1.0), 0.0)
    return (mat @ sparse.diags(scale)).tocsr(), cs


class Resolvent:
    """Discrete resolvent on a phase grid and a trace grid with matching speed cells.

    G_lam and M_lam push sub-sample masses forward.  R_lam and Xi_lam are
    evaluated by pulling back along backward rays (the same footpoint rule
    that defines Psi), then each column is rescaled to the mass that the
    forward operators leave behind, so lam R(lam) conserves mass exactly.
    """

    def __init__(self, pgrid: PhaseGrid, tgrid: TraceGrid, H: TraceOperator, q_x=4, q_dir=2,
                 geo: TransferGeometry = None, q_trace=4):
        if not np.allclose(pgrid.edges, tgrid.edges):
            raise ValueError("phase and trace grids must share speed cells")
        self.pgrid = pgrid
        self.tgrid = tgrid
        self.H = H
        self.geo = transfer_geometry(tgrid, q_trace) if geo is None else geo
        self.rays = phase_rays(pgrid, tgrid, q_x, q_dir)
        # incoming cells that no backward ray reaches are deposited forward instead
        hit = np.zeros(tgrid.nb * tgrid.nd, bool)
        hit[self.rays.foot_b * tgrid.nd + self.rays.foot_j] = True
        self.fallback = _forward_rays(pgrid, tgrid, self.geo, ~hit)
        self._cache = {}

    def _ops(self, lam):
        if lam in self._cache:
            return self._cache[lam]
        pg, tg = self.pgrid, self.tgrid
        # one flight-time speed per cell everywhere; it must match M_lam
        rho = rho_t = tg.flight_speed
        P = self.rays
        sg = P.back
        NP, NT = pg.size, tg.size
        wcell = pg.weight
        r_rows, r_cols, r_vals = [], [], []
        g_rows, g_cols, g_vals = [], [], []
        x_rows, x_cols, x_vals = [], [], []
        for k in range(pg.ns):
            # R_lam: density at the segment's box, integrated along the backward ray
            rows = pg.index(P.box[sg.ray], k, P.dir[sg.ray])
            cols = pg.index(sg.box, k, P.dir[sg.ray])
            dep = (_decay(lam, sg.s_a, rho[k]) - _decay(lam, sg.s_b, rho[k])) / lam
            r_rows.append(rows)
            r_cols.append(cols)
            r_vals.append(wcell[rows] * P.weight[sg.ray] * dep / np.where(wcell[cols] > 0, wcell[cols], 1.0))
            # G_lam: forward exit
            g_rows.append(tg.index(P.exit_b, k, P.exit_j))
            g_cols.append(pg.index(P.box, k, P.dir))
            g_vals.append(P.weight * _decay(lam, P.length, rho[k]))
            # Xi_lam: incoming density at the footpoint, damped over the backward flight
            rows = pg.index(P.box, k, P.dir)
            cols = tg.index(P.foot_b, k, P.foot_j)
            x_rows.append(rows)
            x_cols.append(cols)
            x_vals.append(wcell[rows] * P.weight * _decay(lam, P.back_length, rho_t[k]) / tg.mu[cols])

            F = self.fallback
            if F is not None:
                sb, sj = np.divmod(F["src"], tg.nd)
                dep = (_decay(lam, F["seg"].s_a, rho_t[k]) - _decay(lam, F["seg"].s_b, rho_t[k])) / lam
                x_rows.append(pg.index(F["seg"].box, k, F["dir"][F["seg"].ray]))
                x_cols.append(tg.index(sb[F["seg"].ray], k, sj[F["seg"].ray]))
                x_vals.append(F["weight"][F["seg"].ray] * dep)

        def mk(r, c, v, shape):
            return sparse.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=shape)

        G = mk(g_rows, g_cols, g_vals, (NT, NP))
        M = assemble_M_lambda(tg, lam, self.geo)
        R, _ = _rescale_columns(mk(r_rows, r_cols, r_vals, (NP, NP)),
                                (1.0 - np.asarray(G.sum(axis=0)).ravel()) / lam)
        Xi, _ = _rescale_columns(mk(x_rows, x_cols, x_vals, (NP, NT)), (1.0 - M.column_sums()) / lam)
        ops = {"R": R, "G": G, "Xi": Xi, "M": M}
        self._cache = {lam: ops}
        return ops
    def apply(self, lam, f, tol=SERIES_TOL, max_terms=10 * SLOW_TERMS):
        """R(lam) f for cell masses f; returns (result, number of series terms)."""
        if lam <= 0:
            raise ValueError("lam must be positive")
        ops = self._ops(lam)
        f = np.asarray(f, float)
        scale = np.abs(f).sum()
        out = ops["R"] @ f
        u = ops["G"] @ f
        terms = 0
        while True:
            hu = self.H.matvec(u)
            inc = ops["Xi"] @ hu
            out += inc
            terms += 1
            if np.abs(inc).sum() < tol * scale / lam or terms >= max_terms:
                break
            u = ops["M"].matvec(hu)
        if terms > SLOW_TERMS:
            warnings.warn(f"resolvent series needed {terms} terms", SlowConvergenceWarning)
        return out, terms
