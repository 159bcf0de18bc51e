"""Mass-transport matrices on the trace grid: M0, M_lambda and H.

Operators act on vectors of cell masses (not densities).  A stochastic
operator therefore has unit column sums.  The diffuse part of H is rank one
in velocity on each boundary cell and is stored in factored form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import LinearOperator

from .. import geometry
from ..boundary import IsotropicKernel, MaxwellKernel, PartlyDiffuseBoundary
from .grids import IN, OUT, TraceGrid

DEFAULT_SUBSAMPLES = 4
LOST_MASS_LIMIT = 1e-6


class LostMassError(RuntimeError):
    pass


@dataclass
class BlockPart:
    """Per boundary cell b: y_b += profile[b] * (colweight[b] . x_b)."""

    profile: np.ndarray  # (nb, n_vel), rows sum to 1
    colweight: np.ndarray  # (nb, n_vel)


class TraceOperator(LinearOperator):
    """Sparse part plus block rank-one parts, acting on cell-mass vectors."""

    def __init__(self, grid: TraceGrid, matrix=None, blocks=(), stochastic=True, label=""):
        n = grid.size
        self.grid = grid
        self.matrix = sparse.csr_matrix((n, n)) if matrix is None else sparse.csr_matrix(matrix)
        self.blocks = list(blocks)
        self.stochastic = stochastic
        self.label = label
        super().__init__(dtype=np.float64, shape=(n, n))

    def _matvec(self, x):
        x = np.asarray(x, float).ravel()
        y = self.matrix @ x
        nb = self.grid.nb
        for blk in self.blocks:
            xb = x.reshape(nb, -1)
            s = np.einsum("bv,bv->b", blk.colweight, xb)
            y = y + (blk.profile * s[:, None]).ravel()
        return y

    def _rmatvec(self, y):
        y = np.asarray(y, float).ravel()
        x = self.matrix.T @ y
        nb = self.grid.nb
        for blk in self.blocks:
            yb = y.reshape(nb, -1)
            s = np.einsum("bv,bv->b", blk.profile, yb)
            x = x + (blk.colweight * s[:, None]).ravel()
        return x

    def column_sums(self):
        return self.rmatvec(np.ones(self.shape[0]))

    def nnz(self):
        return self.matrix.nnz + sum(int(np.count_nonzero(b.profile)) * self.grid.n_vel for b in self.blocks)

    def to_sparse(self, max_entries=20_000_000):
        """Dense expansion of block parts into one sparse matrix (small grids only)."""
        if self.nnz() > max_entries:
            raise MemoryError(f"{self.nnz()} entries exceed the export limit")
        mats = [self.matrix]
        g = self.grid
        nv = g.n_vel
        for blk in self.blocks:
            rows, cols, vals = [], [], []
            for b in range(g.nb):
                pr = np.nonzero(blk.profile[b])[0]
                pc = np.nonzero(blk.colweight[b])[0]
                R, C = np.meshgrid(pr, pc, indexing="ij")
                rows.append(b * nv + R.ravel())
                cols.append(b * nv + C.ravel())
                vals.append(np.outer(blk.profile[b, pr], blk.colweight[b, pc]).ravel())
            mats.append(sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                          shape=self.shape))
        out = mats[0]
        for m in mats[1:]:
            out = out + m
        return out.tocsr()

    def adjacency(self):
        """Directed edges col -> row as a sparse pattern, with one hub node per block boundary cell."""
        g = self.grid
        n = g.size
        coo = self.matrix.tocoo()
        keep = coo.data > 0
        src = [coo.col[keep]]
        dst = [coo.row[keep]]
        extra = 0
        for blk in self.blocks:
            hub0 = n + extra
            bb, vv = np.nonzero(blk.colweight > 0)
            src.append(bb * g.n_vel + vv)
            dst.append(hub0 + bb)
            bb, vv = np.nonzero(blk.profile > 0)
            src.append(hub0 + bb)
            dst.append(bb * g.n_vel + vv)
            extra += g.nb
        return np.concatenate(src), np.concatenate(dst), extra


# ---------------------------------------------------------------------------
# ballistic transfer


@dataclass
class TransferGeometry:
    """Sub-sample routing of incoming (boundary, direction) cells to outgoing ones.

    ``src`` and ``dst`` index (boundary cell * nd + direction cell) pairs;
    ``length`` is the chord length travelled by each sub-sample.
    """

    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    length: np.ndarray
    q: int
    redirected: float = 0.0
    lost: float = 0.0
    tau_mean: np.ndarray = field(default=None)  # (nb*nd,) mean chord length per incoming cell


def transfer_geometry(grid: TraceGrid, q=DEFAULT_SUBSAMPLES, tol_graze=geometry.TOL_GRAZE):
    """Trace every incoming sub-sample to its exit and locate the outgoing cell."""
    z, loc, w = grid.subsamples(q)
    nb, nd, S, d = z.shape
    bidx = np.repeat(np.arange(nb), nd * S)
    zz = z.reshape(-1, d)
    n, frame = geometry.tangent_frame(grid.domain, zz)
    ll = np.broadcast_to(loc[None], (nb, nd, S, d)).reshape(-1, d)
    omega = grid.direction(IN, n, frame, ll)
    length = geometry.exit_distance(grid.domain, zz, omega)
    xe = zz + length[:, None] * omega
    b_out = grid.boundary_index(xe)
    n_out, f_out = geometry.tangent_frame(grid.domain, xe)
    j_out, grazing = grid.direction_index(OUT, n_out, f_out, omega)
    ww = w.reshape(-1)
    src = bidx * nd + np.tile(np.repeat(np.arange(nd), S), nb)
    dst = b_out * nd + j_out
    total = ww.sum()
    redirected = float(ww[grazing].sum() / total) if total > 0 else 0.0
    bad = ~np.isfinite(length)
    lost = float(ww[bad].sum() / total) if total > 0 else 0.0
    if lost > LOST_MASS_LIMIT:
        raise LostMassError(f"lost mass fraction {lost:.3g}")
    tau = np.bincount(src, weights=ww * np.where(bad, 0.0, length), minlength=nb * nd)
    norm = np.bincount(src, weights=ww, minlength=nb * nd)
    return TransferGeometry(src, dst, ww, length, q, redirected, lost, tau / np.where(norm > 0, norm, 1.0))


def _transfer_matrix(grid: TraceGrid, geo: TransferGeometry, lam=0.0):
    ns, nd = grid.ns, grid.nd
    sb, sj = np.divmod(geo.src, nd)
    db, dj = np.divmod(geo.dst, nd)
    rows, cols, vals = [], [], []
    for k in range(ns):
        wk = geo.weight
        if lam > 0:
            wk = wk * np.exp(-lam * geo.length / grid.flight_speed[k])
        rows.append((db * ns + k) * nd + dj)
        cols.append((sb * ns + k) * nd + sj)
        vals.append(wk)
    n = grid.size
    mat = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def assemble_M0(grid: TraceGrid, q=DEFAULT_SUBSAMPLES, geo: TransferGeometry = None):
    """Ballistic transfer Gamma_- -> Gamma_+ with exact column sums."""
    geo = transfer_geometry(grid, q) if geo is None else geo
    op = TraceOperator(grid, _transfer_matrix(grid, geo), stochastic=True, label="M0")
    op.geometry = geo
    return op


def assemble_M_lambda(grid: TraceGrid, lam, geo: TransferGeometry):
    """Damped transfer with factor exp(-lam * chord / speed) per sub-sample."""
    return TraceOperator(grid, _transfer_matrix(grid, geo, lam), stochastic=False, label=f"M_{lam:g}")


# ---------------------------------------------------------------------------
# boundary operator


def reflection_targets(grid: TraceGrid, law):
    """Incoming velocity cell reached by reflecting each outgoing velocity cell, per boundary cell."""
    nb, ns, nd = grid.nb, grid.ns, grid.nd
    if law.kind == "specular":
        return np.broadcast_to(np.arange(nd), (nb, nd)).copy()
    if law.kind == "bounce-back" and grid.domain.dim == 2:
        return np.broadcast_to(np.arange(nd)[::-1], (nb, nd)).copy()
    n = np.repeat(grid.n_c, nd, axis=0)
    fr = np.repeat(grid.frame_c, nd, axis=0)
    loc = np.tile(grid.dir_rep, (nb, 1))
    v = grid.direction(OUT, n, fr, loc)
    vin = law.apply(n, v)
    j, _ = grid.direction_index(IN, n, fr, vin)
    return j.reshape(nb, nd)


def diffuse_profile(grid: TraceGrid, kernel, n_sub=4):
    """Incoming-cell masses of the diffuse law at every boundary cell, shape (nb, n_vel), rows sum to 1."""
    nb, ns, nd = grid.nb, grid.ns, grid.nd
    edges = grid.edges
    if isinstance(kernel, (MaxwellKernel, IsotropicKernel)):
        if isinstance(kernel, MaxwellKernel) and callable(kernel.theta):
            ths = kernel._theta_values(grid.x_c)
        else:
            ths = None
        A = np.sum(grid.dir_flux)

        def speed_part(k_iso):
            return np.array([k_iso.flux(a, b) for a, b in zip(edges[:-1], edges[1:])])

        if ths is None:
            base = kernel.kernel_at() if isinstance(kernel, MaxwellKernel) else kernel
            sp = speed_part(base)
            prof = np.broadcast_to((sp[:, None] * grid.dir_flux[None, :] / A).ravel(), (nb, ns * nd)).copy()
        else:
            prof = np.zeros((nb, ns * nd))
            for th in np.unique(ths):
                sp = speed_part(kernel.kernel_at(float(th)))
                prof[ths == th] = (sp[:, None] * grid.dir_flux[None, :] / A).ravel()
    else:
        # generic separable kernel: sub-cell quadrature of k against mu
        prof = np.zeros((nb, ns * nd))
        loc, wl = _dir_sub(grid, n_sub)
        for k in range(ns):
            r = np.linspace(edges[k], edges[k + 1], n_sub + 2)[1:-1]
            wr = np.full(n_sub, grid.speed_flux[k] / n_sub)
            for b in range(nb):
                n = grid.n_c[b]
                fr = grid.frame_c[b]
                w = grid.direction(IN, n, fr, loc.reshape(-1, grid.domain.dim)).reshape(loc.shape)
                vel = r[:, None, None, None] * w[None]
                flat = vel.reshape(-1, grid.domain.dim)
                kv = kernel.density(np.broadcast_to(grid.x_c[b], flat.shape), np.broadcast_to(n, flat.shape),
                                    flat, None).reshape(vel.shape[:-1])
                cell = np.einsum("rjs,r,js->j", kv, wr, wl * grid.dir_flux[:, None])
                prof[b, k * nd:(k + 1) * nd] = cell
    s = prof.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("diffuse kernel has no mass on the grid at some boundary cell")
    return prof / s, s.ravel()


def _dir_sub(grid, q):
    from .grids import _local_subsamples
    return _local_subsamples(grid.domain.dim, grid.dir_edges, q)


def assemble_H(grid: TraceGrid, H: PartlyDiffuseBoundary):
    """H = alpha R + (1 - alpha) K as a column-stochastic mass operator Gamma_+ -> Gamma_-."""
    nb, ns, nd = grid.nb, grid.ns, grid.nd
    alpha = H.alpha(grid.x_c)
    blocks = []
    matrix = None
    if np.any(alpha > 0):
        tgt = reflection_targets(grid, H.reflection)
        b = np.repeat(np.arange(nb), ns * nd)
        k = np.tile(np.repeat(np.arange(ns), nd), nb)
        j = np.tile(np.arange(nd), nb * ns)
        rows = grid.index(b, k, tgt[b, j])
        cols = grid.index(b, k, j)
        matrix = sparse.csr_matrix((alpha[b], (rows, cols)), shape=(grid.size, grid.size))
        matrix.eliminate_zeros()
    if np.any(alpha < 1):
        prof, captured = diffuse_profile(grid, H.kernel)
        colw = np.broadcast_to((1.0 - alpha)[:, None], (nb, ns * nd)).copy()
        blocks.append(BlockPart(prof, colw))
    op = TraceOperator(grid, matrix, blocks, stochastic=True, label="H")
    op.alpha = alpha
    return op


# ---------------------------------------------------------------------------
# structure checks


def column_sum_error(op):
    return float(np.max(np.abs(op.rmatvec(np.ones(op.shape[0])) - 1.0)))


def is_irreducible(M0: TraceOperator, H: TraceOperator):
    """Strong connectivity of M0 H, decided on the graph outgoing -> (H) -> incoming -> (M0) -> outgoing."""
    n = M0.grid.size
    hs, hd, h_extra = H.adjacency()
    ms, md, _ = M0.adjacency()
    # node layout: [0, n) outgoing cells, [n, 2n) incoming cells, then H hubs
    hub = lambda a: np.where(a >= n, a - n + 2 * n, a)  # noqa: E731
    src_h = np.where(hs >= n, hub(hs), hs)
    dst_h = np.where(hd >= n, hub(hd), hd + n)
    src = np.concatenate([src_h, ms + n])
    dst = np.concatenate([dst_h, md])
    total = 2 * n + h_extra
    g = sparse.csr_matrix((np.ones(src.size), (src, dst)), shape=(total, total))
    _, labels = csgraph.connected_components(g, directed=True, connection="strong")
    out = labels[:n]
    return bool(np.all(out == out[0])), int(np.unique(out).size)
