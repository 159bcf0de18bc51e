"""Orthogonally invariant velocity measures.

A measure is stored through its radial part m0 (a density on an interval of
speeds or a finite list of atoms).  With sigma the surface measure of the unit
sphere, integrals follow the polar formula

    int psi dm = |S^{d-1}|^{-1} int m0(drho) int psi(rho w) sigma(dw).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .geometry import sphere_area

GAUSS_PER_DECADE = 64


def half_sphere_flux(d):
    """int_{w.n>0} (w.n) sigma(dw): 2 for d=2 and pi for d=3."""
    return sphere_area(d - 1) / (d - 1)


@dataclass(frozen=True)
class VelocityMeasure:
    dim: int
    rho_min: float
    rho_max: float
    density: Optional[Callable] = None  # m0 density w(rho)
    atoms: tuple = ()  # ((rho, mass), ...)
    name: str = "custom"
    log_w: Optional[Callable] = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if self.density is None and not self.atoms:
            raise ValueError("need a radial density or atoms")
        if self.density is not None and not 0 <= self.rho_min < self.rho_max < math.inf:
            raise ValueError("need 0 <= rho_min < rho_max < inf")
        if any(m <= 0 or r <= 0 for r, m in self.atoms):
            raise ValueError("atom speeds and masses must be positive")

    def log_density(self, t):
        """log w(e^t); uses ``log_w`` when supplied to avoid overflow."""
        if self.log_w is not None:
            val = self.log_w(np.asarray(t, float))
        else:
            with np.errstate(divide="ignore"):
                val = np.log(self.density(np.exp(t)))
        r = np.exp(t)
        return np.where((r >= self.rho_min) & (r <= self.rho_max), val, -np.inf)

    @property
    def is_atomic(self):
        return self.density is None

    @property
    def sphere(self):
        return sphere_area(self.dim)

    # -- radial integrals -------------------------------------------------

    def radial_nodes(self, a=None, b=None, per_decade=GAUSS_PER_DECADE):
        """Nodes and weights for int_a^b f(rho) m0(drho)."""
        a = self.rho_min if a is None else max(a, self.rho_min)
        b = self.rho_max if b is None else min(b, self.rho_max)
        if self.is_atomic:
            r = np.array([r for r, _ in self.atoms])
            m = np.array([m for _, m in self.atoms])
            sel = (r >= a) & (r <= b)
            return r[sel], m[sel]
        if b <= a:
            return np.zeros(0), np.zeros(0)
        edges = _decade_edges(a, b)
        g, w = np.polynomial.legendre.leggauss(per_decade)
        lo, hi = edges[:-1, None], edges[1:, None]
        nodes = 0.5 * (hi - lo) * g[None, :] + 0.5 * (hi + lo)
        weights = 0.5 * (hi - lo) * w[None, :] * self.density(nodes)
        return nodes.ravel(), weights.ravel()

    def radial_integral(self, f, a=None, b=None):
        r, w = self.radial_nodes(a, b)
        return float(np.sum(w * f(r))) if r.size else 0.0

    def total_mass(self):
        """m(V); equals int m0 because sigma/|S| has unit mass."""
        return self.radial_integral(np.ones_like)

    def speed_moment(self, a, b, power):
        """int_a^b rho^power m0(drho), with exact quad fallback for the density case."""
        if self.is_atomic:
            return self.radial_integral(lambda r: r ** power, a, b)
        a = max(a, self.rho_min)
        b = min(b, self.rho_max)
        if b <= a:
            return 0.0
        return self.radial_integral(lambda r: r ** power, a, b)

    # -- directions ---------------------------------------------------------

    def direction_nodes(self, n):
        """Unit vectors and weights summing to one (normalised sigma)."""
        if self.dim == 2:
            th = 2.0 * np.pi * (np.arange(n) + 0.5) / n
            return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(n, 1.0 / n)
        nz = max(2, int(round(math.sqrt(n / 2.0))))
        nphi = 2 * nz
        z, wz = np.polynomial.legendre.leggauss(nz)
        ph = 2.0 * np.pi * (np.arange(nphi) + 0.5) / nphi
        Z, P = np.meshgrid(z, ph, indexing="ij")
        s = np.sqrt(1.0 - Z ** 2)
        pts = np.stack([s * np.cos(P), s * np.sin(P), Z], axis=-1).reshape(-1, 3)
        w = np.repeat(wz / 2.0, nphi) / nphi
        return pts, w


@dataclass(frozen=True)
class VelocityQuadrature:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def total(self):
        return float(self.weights.sum())


def _decade_edges(a, b):
    lo = a
    if a <= 0:
        lo = b * 1e-14
    k0 = math.floor(math.log10(lo))
    k1 = math.ceil(math.log10(b))
    inner = [10.0 ** k for k in range(k0 + 1, k1) if lo < 10.0 ** k < b]
    edges = [lo] + inner + [b]
    if a <= 0:
        edges = [0.0] + edges
    return np.array(edges)


# ---------------------------------------------------------------------------
# presets


def lebesgue_annulus(dim, rho_min, rho_max):
    """Lebesgue measure restricted to rho_min <= |v| <= rho_max."""
    area = sphere_area(dim)
    log_area = math.log(area)
    return VelocityMeasure(dim, float(rho_min), float(rho_max),
                           density=lambda r: area * r ** (dim - 1), name="lebesgue-annulus",
                           log_w=lambda t: log_area + (dim - 1) * t)


def single_speed(dim, speed=1.0, mass=1.0):
    """Uniform measure on the sphere of radius ``speed`` with total mass ``mass``."""
    return VelocityMeasure(dim, float(speed), float(speed), atoms=((float(speed), float(mass)),),
                           name="single-speed")


def multigroup(dim, speeds, masses):
    atoms = tuple((float(r), float(m)) for r, m in zip(speeds, masses))
    return VelocityMeasure(dim, min(r for r, _ in atoms), max(r for r, _ in atoms), atoms=atoms,
                           name="multigroup")


# ---------------------------------------------------------------------------
# quadrature and integration


def quadrature(measure: VelocityMeasure, n_dir=64, per_decade=GAUSS_PER_DECADE):
    r, wr = measure.radial_nodes(per_decade=per_decade)
    dirs, wd = measure.direction_nodes(n_dir)
    nodes = (r[:, None, None] * dirs[None, :, :]).reshape(-1, measure.dim)
    weights = (wr[:, None] * wd[None, :]).ravel()
    return VelocityQuadrature(nodes, weights)


def integrate_velocity(measure: VelocityMeasure, quad: VelocityQuadrature, psi):
    """Polar-decomposed quadrature of int psi dm."""
    return float(np.sum(quad.weights * psi(quad.nodes)))


def mu_density(normal, v):
    """Density of mu_x with respect to m: |v.n|."""
    return np.abs(np.sum(np.asarray(v) * np.asarray(normal), axis=-1))


def angular_flux_weight(dim, cell):
    """int over a local direction cell of |w.n| sigma(dw).

    d=2 cells are (psi_lo, psi_hi) with psi the angle from the normal.
    d=3 cells are (s_lo, s_hi, phi_lo, phi_hi) with s = sin^2 of the polar angle.
    """
    cell = np.asarray(cell, float)
    if dim == 2:
        return np.abs(np.sin(cell[..., 1]) - np.sin(cell[..., 0]))
    return 0.5 * np.abs(cell[..., 1] - cell[..., 0]) * np.abs(cell[..., 3] - cell[..., 2])


def mu_weight(measure: VelocityMeasure, speed_cell, direction_cell):
    """mu_x-weight of (speed interval) x (local direction cell)."""
    lo, hi = speed_cell
    radial = measure.speed_moment(lo, hi, 1.0) / measure.sphere
    return radial * angular_flux_weight(measure.dim, direction_cell)


def mu_total(measure: VelocityMeasure):
    """Total mu_x mass of one half space Gamma_-(x) (or Gamma_+(x))."""
    return measure.speed_moment(0.0, math.inf, 1.0) * half_sphere_flux(measure.dim) / measure.sphere


# ---------------------------------------------------------------------------
# sampling


class RadialSampler:
    """Inverse-CDF sampler for g(rho) m0(drho) on [lo, hi].

    The density is tabulated in t = log(rho) and handled in log form, so
    weights that blow up like a power of 1/rho near zero stay finite.  Speeds
    below ``floor`` are not resolved: a draw in that mass returns 0 and the
    lost fraction is reported as ``truncated_mass``.

    ``log_g`` is the log of the radial weight as a function of t.
    """

    def __init__(self, measure: VelocityMeasure, log_g=None, lo=None, hi=None, floor=1e-100,
                 table_size=20001):
        self.measure = measure
        log_g = (lambda t: np.zeros_like(t)) if log_g is None else log_g
        lo = measure.rho_min if lo is None else max(lo, measure.rho_min)
        hi = measure.rho_max if hi is None else min(hi, measure.rho_max)
        if measure.is_atomic:
            r = np.array([r for r, _ in measure.atoms])
            m = np.array([m for _, m in measure.atoms])
            keep = (r >= lo) & (r <= hi)
            if not np.any(keep):
                raise ValueError("zero-mass weight")
            self.atoms = r[keep]
            p = m[keep] * np.exp(log_g(np.log(r[keep])))
            if p.sum() <= 0:
                raise ValueError("zero-mass weight")
            self.cdf = np.cumsum(p) / p.sum()
            self.truncated_mass = 0.0
            return
        self.atoms = None
        if hi <= lo:
            raise ValueError("empty speed range")
        start = max(lo, floor)

        def log_dens(t):
            t = np.asarray(t, float)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                val = log_g(t) + measure.log_density(t) + t
            return np.where(np.isnan(val), -np.inf, val)

        y = np.linspace(np.log(start), np.log(hi), table_size)
        ld = log_dens(y)
        shift = float(np.max(ld[np.isfinite(ld)])) if np.any(np.isfinite(ld)) else 0.0
        dens = np.exp(ld - shift)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(y))])
        below = 0.0
        if start > lo:
            a = np.log(lo) if lo > 0 else -np.inf
            below, _ = integrate.quad(lambda t: float(np.exp(log_dens(t) - shift)), a, np.log(start),
                                      limit=400)
        if cum[-1] + below <= 0:
            raise ValueError("zero-mass weight")
        self.y = y
        self.cum = cum
        self.truncated_mass = float(below / (cum[-1] + below))

    def __call__(self, u):
        u = np.asarray(u, float)
        if self.atoms is not None:
            idx = np.searchsorted(self.cdf, u, side="right").clip(0, len(self.atoms) - 1)
            return self.atoms[idx]
        t = u - self.truncated_mass
        out = np.zeros_like(u)
        ok = t >= 0
        target = t[ok] / (1.0 - self.truncated_mass) * self.cum[-1]
        out[ok] = np.exp(np.interp(target, self.cum, self.y))
        return out

    def cdf_at(self, rho):
        """Model CDF, used by goodness-of-fit checks."""
        rho = np.asarray(rho, float)
        if self.atoms is not None:
            idx = np.searchsorted(self.atoms, rho, side="right")
            return np.where(idx > 0, self.cdf[np.maximum(idx - 1, 0)], 0.0)
        c = np.interp(np.log(np.maximum(rho, 1e-300)), self.y, self.cum, left=0.0)
        return self.truncated_mass + (1.0 - self.truncated_mass) * c / self.cum[-1]


def uniform_directions(dim, u):
    """Map uniforms of shape (..., d-1) to uniform unit vectors."""
    u = np.asarray(u, float)
    if dim == 2:
        th = 2.0 * np.pi * u[..., 0]
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    z = 2.0 * u[..., 0] - 1.0
    ph = 2.0 * np.pi * u[..., 1]
    s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([s * np.cos(ph), s * np.sin(ph), z], axis=-1)


def cosine_directions(axis, frame, u):
    """Directions in the half space w.axis > 0 with density proportional to w.axis.

    ``frame`` holds the tangent vectors at the boundary point, shape (..., d-1, d).
    """
    u = np.asarray(u, float)
    d = axis.shape[-1]
    if d == 2:
        s = 2.0 * u[..., 0] - 1.0
        c = np.sqrt(np.clip(1.0 - s * s, 0.0, None))
        return c[..., None] * axis + s[..., None] * frame[..., 0, :]
    sin2 = u[..., 0]
    c = np.sqrt(np.clip(1.0 - sin2, 0.0, None))
    s = np.sqrt(sin2)
    ph = 2.0 * np.pi * u[..., 1]
    return (c[..., None] * axis + (s * np.cos(ph))[..., None] * frame[..., 0, :]
            + (s * np.sin(ph))[..., None] * frame[..., 1, :])


@dataclass(frozen=True)
class SeparableWeight:
    """g(v) = radial(|v|) * angular(v/|v|) with angular <= angular_bound."""

    radial: Callable
    angular: Callable
    angular_bound: float


def sample_velocity(measure: VelocityMeasure, weight: SeparableWeight, rng, size, max_rounds=200):
    """Draw from weight(v) m(dv) / int weight dm.

    Speed by inverse CDF of the radial factor, direction uniform then accepted
    with probability angular/angular_bound.
    """
    rng = np.random.default_rng(rng)
    with np.errstate(divide="ignore"):
        sampler = RadialSampler(measure, lambda t: np.log(weight.radial(np.exp(t))))
    speeds = sampler(rng.random(size))
    dirs = np.empty((size, measure.dim))
    todo = np.arange(size)
    for _ in range(max_rounds):
        if todo.size == 0:
            break
        w = uniform_directions(measure.dim, rng.random((todo.size, measure.dim - 1)))
        acc = rng.random(todo.size) * weight.angular_bound <= weight.angular(w)
        dirs[todo[acc]] = w[acc]
        todo = todo[~acc]
    if todo.size:
        raise RuntimeError("angular rejection did not terminate; check angular_bound")
    return speeds[:, None] * dirs


def rejection_sample(measure: VelocityMeasure, g, g_bound, rng, size, max_rounds=10_000):
    """Plain rejection from m restricted to its support, for non-separable weights.

    Returns (samples, acceptance fraction).
    """
    rng = np.random.default_rng(rng)
    sampler = RadialSampler(measure)
    out = np.empty((size, measure.dim))
    todo = size
    tried = 0
    accepted = 0
    for _ in range(max_rounds):
        if todo == 0:
            break
        n = max(todo * 2, 1024)
        v = sampler(rng.random(n))[:, None] * uniform_directions(measure.dim, rng.random((n, measure.dim - 1)))
        acc = rng.random(n) * g_bound <= g(v)
        if np.any(g(v) > g_bound * (1 + 1e-12)):
            raise ValueError("g exceeds its declared bound")
        tried += n
        accepted += int(acc.sum())
        take = v[acc][:todo]
        out[size - todo:size - todo + len(take)] = take
        todo -= len(take)
    if todo:
        raise RuntimeError("rejection sampler failed")
    return out, accepted / tried
