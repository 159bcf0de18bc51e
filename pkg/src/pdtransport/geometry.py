"""Ray geometry of smooth bounded domains.

Domains are given by an analytic level function ``phi`` with the domain
equal to ``{phi < 0}``.  Everything here is vectorised over leading array
axes: positions have shape ``(..., d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

TOL_BOUNDARY_REL = 1e-12  # |phi(z)| <= TOL_BOUNDARY_REL * D on returned points
TOL_GRAZE = 1e-9  # |cos| below this is grazing
TOL_GRAD = 1e-10
SAMPLES_PER_DIAMETER = 256
_CHUNK = 32
_BAND_REL = 1e-10  # points this close to the boundary count as boundary points

OUTGOING = 1
INCOMING = -1
GRAZING = 0

# Sign in front of the direction-gradient formula for tau_minus.  Frozen after
# calibration against finite differences on the unit disk, see
# ``calibrate_omega_sign``.
OMEGA_GRADIENT_SIGN = -1.0


class GeometryError(ValueError):
    pass


class DegenerateGradientError(GeometryError):
    pass


class NoExitError(GeometryError):
    pass


class GrazingError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# boundary charts


class Chart:
    """Parametrisation of one boundary component by u in [0, 1)^(d-1)."""

    dim: int

    def point(self, u):
        raise NotImplementedError

    def tangents(self, u):
        """Partial derivatives of ``point``, shape (..., d-1, d)."""
        raise NotImplementedError

    def locate(self, x):
        raise NotImplementedError

    def area_element(self, u):
        t = self.tangents(u)
        if self.dim == 2:
            return np.linalg.norm(t[..., 0, :], axis=-1)
        return np.linalg.norm(np.cross(t[..., 0, :], t[..., 1, :]), axis=-1)

    def measure(self, lo, hi, order=8):
        """Surface measure of the parameter rectangle(s) [lo, hi)."""
        lo = np.atleast_2d(np.asarray(lo, float))
        hi = np.atleast_2d(np.asarray(hi, float))
        g, w = np.polynomial.legendre.leggauss(order)
        g = 0.5 * (g + 1.0)
        w = 0.5 * w
        if self.dim == 2:
            u = lo[:, :1] + (hi[:, :1] - lo[:, :1]) * g[None, :]
            val = self.area_element(u[..., None])
            return (val * w).sum(-1) * (hi[:, 0] - lo[:, 0])
        g1, g2 = np.meshgrid(g, g, indexing="ij")
        ww = np.outer(w, w).ravel()
        u1 = lo[:, :1] + (hi[:, :1] - lo[:, :1]) * g1.ravel()[None, :]
        u2 = lo[:, 1:2] + (hi[:, 1:2] - lo[:, 1:2]) * g2.ravel()[None, :]
        val = self.area_element(np.stack([u1, u2], axis=-1))
        return (val * ww).sum(-1) * (hi[:, 0] - lo[:, 0]) * (hi[:, 1] - lo[:, 1])


class _CircleChart(Chart):
    dim = 2

    def __init__(self, radius):
        self.radius = float(radius)

    def point(self, u):
        th = 2.0 * np.pi * np.asarray(u)[..., 0]
        return self.radius * np.stack([np.cos(th), np.sin(th)], axis=-1)

    def tangents(self, u):
        th = 2.0 * np.pi * np.asarray(u)[..., 0]
        t = 2.0 * np.pi * self.radius * np.stack([-np.sin(th), np.cos(th)], axis=-1)
        return t[..., None, :]

    def locate(self, x):
        th = np.arctan2(x[..., 1], x[..., 0])
        return (np.mod(th / (2.0 * np.pi), 1.0))[..., None]


class _EllipseChart(Chart):
    dim = 2

    def __init__(self, a, b):
        self.a, self.b = float(a), float(b)

    def point(self, u):
        th = 2.0 * np.pi * np.asarray(u)[..., 0]
        return np.stack([self.a * np.cos(th), self.b * np.sin(th)], axis=-1)

    def tangents(self, u):
        th = 2.0 * np.pi * np.asarray(u)[..., 0]
        t = 2.0 * np.pi * np.stack([-self.a * np.sin(th), self.b * np.cos(th)], axis=-1)
        return t[..., None, :]

    def locate(self, x):
        th = np.arctan2(x[..., 1] / self.b, x[..., 0] / self.a)
        return (np.mod(th / (2.0 * np.pi), 1.0))[..., None]


class _StarChart(Chart):
    dim = 2

    def __init__(self, star):
        self.star = star

    def point(self, u):
        th = 2.0 * np.pi * np.asarray(u)[..., 0]
        r = self.star.radial(th)
        return r[..., None] * np.stack([np.cos(th), np.sin(th)], axis=-1)

    def tangents(self, u):
        th = 2.0 * np.pi * np.asarray(u)[..., 0]
        r = self.star.radial(th)
        dr = self.star.radial_derivative(th)
        c, s = np.cos(th), np.sin(th)
        t = 2.0 * np.pi * np.stack([dr * c - r * s, dr * s + r * c], axis=-1)
        return t[..., None, :]

    def locate(self, x):
        th = np.arctan2(x[..., 1], x[..., 0])
        return (np.mod(th / (2.0 * np.pi), 1.0))[..., None]


class _SphereChart(Chart):
    """Axis-scaled sphere: u1 -> z = 1 - 2 u1, u2 -> azimuth."""

    dim = 3

    def __init__(self, axes):
        self.axes = np.asarray(axes, float)

    def point(self, u):
        u = np.asarray(u)
        z = 1.0 - 2.0 * u[..., 0]
        ph = 2.0 * np.pi * u[..., 1]
        s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        p = np.stack([s * np.cos(ph), s * np.sin(ph), z], axis=-1)
        return p * self.axes

    def tangents(self, u):
        u = np.asarray(u)
        z = 1.0 - 2.0 * u[..., 0]
        ph = 2.0 * np.pi * u[..., 1]
        s = np.sqrt(np.clip(1.0 - z * z, 1e-300, None))
        dz = np.stack([z / s * np.cos(ph), z / s * np.sin(ph), -np.ones_like(z)], axis=-1)
        dz = 2.0 * dz  # dz/du1 = -2 and d s/dz = -z/s
        dph = 2.0 * np.pi * np.stack([-s * np.sin(ph), s * np.cos(ph), np.zeros_like(z)], axis=-1)
        return np.stack([dz * self.axes, dph * self.axes], axis=-2)

    def locate(self, x):
        y = x / self.axes
        y = y / np.linalg.norm(y, axis=-1, keepdims=True)
        u1 = np.clip((1.0 - y[..., 2]) / 2.0, 0.0, np.nextafter(1.0, 0.0))
        u2 = np.mod(np.arctan2(y[..., 1], y[..., 0]) / (2.0 * np.pi), 1.0)
        return np.stack([u1, u2], axis=-1)


# ---------------------------------------------------------------------------
# domains


class Domain:
    """Base class.  Subclasses provide ``level``, ``gradient`` and charts."""

    kind = "domain"
    dim = 2
    diameter = 1.0

    def level(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def charts(self):
        raise NotImplementedError

    def chart_index(self, x):
        return np.zeros(np.shape(x)[:-1], dtype=int)

    def volume(self):
        raise NotImplementedError

    def bounding_box(self):
        raise NotImplementedError

    def distance_to_boundary(self, x):
        """Exact distance when available, otherwise ``None``."""
        return None

    @property
    def tol_boundary(self):
        return TOL_BOUNDARY_REL * self.diameter

    def locate(self, x):
        """Return (chart index, chart parameter) for boundary points."""
        x = np.asarray(x, float)
        idx = self.chart_index(x)
        u = np.zeros(x.shape[:-1] + (self.dim - 1,))
        for k, ch in enumerate(self.charts()):
            sel = idx == k
            if np.any(sel):
                u[sel] = ch.locate(x[sel])
        return idx, u

    def perimeter(self):
        lo = np.zeros((1, self.dim - 1))
        return float(sum(ch.measure(lo, np.ones_like(lo), order=64)[0] for ch in self.charts()))

    def describe(self):
        return {"kind": self.kind, "dimension": self.dim, "diameter": self.diameter}


@dataclass(frozen=True)
class Disk(Domain):
    radius: float = 1.0
    dim: int = 2

    kind = "disk"

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError("radius must be positive")
        if self.dim not in (2, 3):
            raise GeometryError("dimension must be 2 or 3")

    @property
    def diameter(self):
        return 2.0 * self.radius

    def level(self, x):
        return np.linalg.norm(x, axis=-1) - self.radius

    def gradient(self, x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.where(r > 0, r, 1.0)

    def charts(self):
        if self.dim == 2:
            return [_CircleChart(self.radius)]
        return [_SphereChart([self.radius] * 3)]

    def volume(self):
        if self.dim == 2:
            return math.pi * self.radius ** 2
        return 4.0 / 3.0 * math.pi * self.radius ** 3

    def bounding_box(self):
        return -self.radius * np.ones(self.dim), self.radius * np.ones(self.dim)

    def distance_to_boundary(self, x):
        return self.radius - np.linalg.norm(x, axis=-1)


def Ball(radius=1.0):
    return Disk(radius=radius, dim=3)


@dataclass(frozen=True)
class Ellipse(Domain):
    """Ellipse (d=2) or ellipsoid (d=3) with the given semi-axes."""

    semi_axes: tuple = (2.0, 1.0)

    kind = "ellipse"

    def __post_init__(self):
        ax = tuple(float(a) for a in self.semi_axes)
        if len(ax) not in (2, 3) or min(ax) <= 0:
            raise GeometryError("semi_axes must be 2 or 3 positive numbers")
        object.__setattr__(self, "semi_axes", ax)

    @property
    def dim(self):
        return len(self.semi_axes)

    @property
    def diameter(self):
        return 2.0 * max(self.semi_axes)

    @property
    def _axes(self):
        return np.asarray(self.semi_axes)

    def level(self, x):
        return (np.linalg.norm(x / self._axes, axis=-1) - 1.0) * min(self.semi_axes)

    def gradient(self, x):
        y = x / self._axes
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        return y / self._axes / np.where(r > 0, r, 1.0) * min(self.semi_axes)

    def charts(self):
        if self.dim == 2:
            return [_EllipseChart(*self.semi_axes)]
        return [_SphereChart(self.semi_axes)]

    def volume(self):
        p = float(np.prod(self.semi_axes))
        return math.pi * p if self.dim == 2 else 4.0 / 3.0 * math.pi * p

    def bounding_box(self):
        return -self._axes, self._axes.copy()


def Ellipsoid(a, b, c):
    return Ellipse(semi_axes=(a, b, c))


@dataclass(frozen=True)
class Annulus(Domain):
    """Annulus (d=2) or spherical shell (d=3).  Not convex."""

    r_in: float = 0.5
    r_out: float = 1.0
    dim: int = 2

    kind = "annulus"

    def __post_init__(self):
        if not 0 < self.r_in < self.r_out:
            raise GeometryError("need 0 < r_in < r_out")

    @property
    def diameter(self):
        return 2.0 * self.r_out

    def level(self, x):
        r = np.linalg.norm(x, axis=-1)
        return np.maximum(r - self.r_out, self.r_in - r)

    def gradient(self, x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        e = x / np.where(r > 0, r, 1.0)
        outer = (r - self.r_out) >= (self.r_in - r)
        return np.where(outer, e, -e)

    def chart_index(self, x):
        r = np.linalg.norm(x, axis=-1)
        return np.where(r > 0.5 * (self.r_in + self.r_out), 0, 1)

    def charts(self):
        if self.dim == 2:
            return [_CircleChart(self.r_out), _CircleChart(self.r_in)]
        return [_SphereChart([self.r_out] * 3), _SphereChart([self.r_in] * 3)]

    def volume(self):
        if self.dim == 2:
            return math.pi * (self.r_out ** 2 - self.r_in ** 2)
        return 4.0 / 3.0 * math.pi * (self.r_out ** 3 - self.r_in ** 3)

    def bounding_box(self):
        return -self.r_out * np.ones(self.dim), self.r_out * np.ones(self.dim)

    def distance_to_boundary(self, x):
        r = np.linalg.norm(x, axis=-1)
        return np.minimum(self.r_out - r, r - self.r_in)


def Shell(r_in, r_out):
    return Annulus(r_in=r_in, r_out=r_out, dim=3)


@dataclass(frozen=True)
class SmoothStar(Domain):
    """Star-shaped planar domain r(theta) = r0 (1 + sum a_k cos k theta + b_k sin k theta)."""

    r0: float = 1.0
    cos_coeffs: tuple = ()
    sin_coeffs: tuple = ()

    kind = "smooth-star"
    dim = 2

    def __post_init__(self):
        object.__setattr__(self, "cos_coeffs", tuple(float(c) for c in self.cos_coeffs))
        object.__setattr__(self, "sin_coeffs", tuple(float(c) for c in self.sin_coeffs))
        th = np.linspace(0, 2 * np.pi, 4097)
        if self.r0 <= 0 or np.min(self.radial(th)) <= 0:
            raise GeometryError("radial function must stay positive")

    def radial(self, th):
        th = np.asarray(th, float)
        s = np.ones_like(th)
        for k, a in enumerate(self.cos_coeffs, start=1):
            s = s + a * np.cos(k * th)
        for k, b in enumerate(self.sin_coeffs, start=1):
            s = s + b * np.sin(k * th)
        return self.r0 * s

    def radial_derivative(self, th):
        th = np.asarray(th, float)
        s = np.zeros_like(th)
        for k, a in enumerate(self.cos_coeffs, start=1):
            s = s - k * a * np.sin(k * th)
        for k, b in enumerate(self.sin_coeffs, start=1):
            s = s + k * b * np.cos(k * th)
        return self.r0 * s

    @property
    def diameter(self):
        th = np.linspace(0, 2 * np.pi, 4097)
        return 2.0 * float(np.max(self.radial(th))) * (1.0 + 1e-6)

    def level(self, x):
        th = np.arctan2(x[..., 1], x[..., 0])
        return np.linalg.norm(x, axis=-1) - self.radial(th)

    def gradient(self, x):
        r2 = np.sum(x * x, axis=-1)
        r = np.sqrt(r2)
        th = np.arctan2(x[..., 1], x[..., 0])
        dr = self.radial_derivative(th)
        safe = np.where(r > 0, r, 1.0)
        gx = x[..., 0] / safe + dr * x[..., 1] / np.where(r2 > 0, r2, 1.0)
        gy = x[..., 1] / safe - dr * x[..., 0] / np.where(r2 > 0, r2, 1.0)
        return np.stack([gx, gy], axis=-1)

    def charts(self):
        return [_StarChart(self)]

    def volume(self):
        val, _ = integrate.quad(lambda t: 0.5 * self.radial(t) ** 2, 0, 2 * np.pi, limit=200)
        return val

    def bounding_box(self):
        r = self.diameter / 2.0
        return -r * np.ones(2), r * np.ones(2)


# ---------------------------------------------------------------------------
# normals, frames, classification


def normal(domain: Domain, x):
    """Outward unit normal n = grad(phi)/|grad(phi)|."""
    x = np.asarray(x, float)
    g = domain.gradient(x)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(gn < TOL_GRAD):
        raise DegenerateGradientError("level gradient vanishes near the boundary")
    return g / gn


def tangent_frame(domain: Domain, x):
    """Return (n, T) with T of shape (..., d-1, d), orthonormal and orthogonal to n."""
    n = normal(domain, x)
    if domain.dim == 2:
        t = np.stack([-n[..., 1], n[..., 0]], axis=-1)
        return n, t[..., None, :]
    ref = np.zeros_like(n)
    ref[..., 2] = 1.0
    near_pole = np.abs(n[..., 2]) > 0.9
    ref[near_pole] = np.array([1.0, 0.0, 0.0])
    t1 = np.cross(ref, n)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return n, np.stack([t1, t2], axis=-2)


def classify(domain: Domain, x, v, tol_graze=TOL_GRAZE):
    """Side of (x, v) on the boundary: OUTGOING, INCOMING or GRAZING."""
    v = np.asarray(v, float)
    n = normal(domain, x)
    c = np.sum(v * n, axis=-1) / np.linalg.norm(v, axis=-1)
    return np.where(c > tol_graze, OUTGOING, np.where(c < -tol_graze, INCOMING, GRAZING))


@dataclass
class BoundaryPoint:
    x: np.ndarray
    v: np.ndarray
    side: np.ndarray = field(default=None)


# ---------------------------------------------------------------------------
# exit times


def _scan(domain, x, w, lo, span, nsteps):
    """First sample s = lo + k*span/nsteps (k >= 1) with phi > 0; NaN when none."""
    h = span / nsteps
    k = np.arange(1, nsteps + 1)
    s = lo[:, None] + h[:, None] * k[None, :]
    pos = domain.level(x[:, None, :] + s[..., None] * w[:, None, :]) > 0
    hit = pos.any(axis=1)
    first = pos.argmax(axis=1)
    rows = np.arange(len(x))
    hi = np.where(hit, s[rows, first], np.nan)
    new_lo = np.where(first > 0, s[rows, np.maximum(first - 1, 0)], lo)
    return hi, new_lo, hit


def exit_distance(domain: Domain, x, w, *, max_distance=None):
    """Distance to the first boundary crossing along the unit direction ``w``.

    Starting points on the boundary that face outward return 0.
    """
    x = np.asarray(x, float)
    w = np.asarray(w, float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    w = np.atleast_2d(w)
    x, w = np.broadcast_arrays(x, w)
    n = x.shape[0]
    D = domain.diameter
    tol = domain.tol_boundary
    out = np.full(n, np.nan)

    phi0 = domain.level(x)
    band = np.abs(phi0) <= _BAND_REL * D
    if np.any(band):
        g = domain.gradient(x[band])
        facing_out = np.sum(g * w[band], axis=-1) >= 0.0
        idx = np.nonzero(band)[0][facing_out]
        out[idx] = 0.0

    pending = np.nonzero(np.isnan(out))[0]
    h = D / SAMPLES_PER_DIAMETER
    limit = (max_distance if max_distance is not None else D) * 1.25 + h
    lo = np.zeros(n)
    hi = np.full(n, np.nan)
    start = 0.0
    todo = pending
    while todo.size:
        if start > limit:
            raise NoExitError(f"{todo.size} rays did not leave the domain within {limit:.3g}")
        s0 = np.full(todo.size, start)
        h_, lo_, hit = _scan(domain, x[todo], w[todo], s0, np.full(todo.size, _CHUNK * h), _CHUNK)
        done = todo[hit]
        hi[done] = h_[hit]
        lo[done] = lo_[hit]
        todo = todo[~hit]
        start += _CHUNK * h

    # chord shorter than one sample step: refine the first interval
    short = pending[lo[pending] == 0.0]
    for _ in range(4):
        if short.size == 0:
            break
        h_, lo_, hit = _scan(domain, x[short], w[short], np.zeros(short.size), hi[short], 64)
        hi[short[hit]] = h_[hit]
        lo[short[hit]] = lo_[hit]
        short = short[lo[short] == 0.0]

    if pending.size:
        out[pending] = _refine_root(domain, x[pending], w[pending], lo[pending], hi[pending], tol)
    return out[0] if single else out


def _refine_root(domain, x, w, lo, hi, tol):
    """Safeguarded Newton inside a sign-change bracket."""
    lo = lo.copy()
    hi = hi.copy()
    s = 0.5 * (lo + hi)
    result = np.full(len(x), np.nan)
    act = np.arange(len(x))
    floor = 4.0 * np.finfo(float).eps * max(1.0, domain.diameter)
    for _ in range(200):
        if act.size == 0:
            break
        p = x[act] + s[act, None] * w[act]
        f = domain.level(p)
        g = np.sum(domain.gradient(p) * w[act], axis=-1)
        pos = f > 0
        hi[act] = np.where(pos, s[act], hi[act])
        lo[act] = np.where(pos, lo[act], s[act])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(g != 0, f / g, np.inf)
        conv = (np.abs(f) <= tol) & (np.abs(step) <= tol)
        conv |= (hi[act] - lo[act]) <= floor
        conv |= (np.abs(f) <= tol) & ((hi[act] - lo[act]) <= 1e3 * floor)
        newton = s[act] - step
        ok = (newton >= lo[act]) & (newton < hi[act]) & np.isfinite(newton)
        # one last Newton polish on convergence; cheap and gains several digits
        result[act[conv]] = np.where(ok[conv], newton[conv], s[act[conv]])
        s[act] = np.where(ok, newton, 0.5 * (lo[act] + hi[act]))
        act = act[~conv]
    if act.size:
        # bracket exhausted numerically; accept the midpoint
        result[act] = 0.5 * (lo[act] + hi[act])
    return result


def exit_time(domain: Domain, x, v, direction="forward"):
    """t_+ (forward) or t_- (backward) for the ray x +/- s v."""
    v = np.asarray(v, float)
    speed = np.linalg.norm(v, axis=-1)
    if np.any(speed == 0):
        raise GeometryError("zero velocity has no exit time")
    sign = {"forward": 1.0, "backward": -1.0}[direction]
    w = sign * v / speed[..., None]
    return exit_distance(domain, x, w) / speed


def ballistic_flow(domain: Domain, x, v, tol_graze=TOL_GRAZE):
    """Map outgoing (x, v) to the incoming point at the far end of its backward chord."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    t = exit_time(domain, x, v, "backward")
    z = x - np.asarray(t)[..., None] * v
    return BoundaryPoint(z, v.copy(), classify(domain, z, v, tol_graze))


def ballistic_flow_inv(domain: Domain, x, v, tol_graze=TOL_GRAZE):
    """Map incoming (x, v) to the outgoing point where the forward ray exits."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    t = exit_time(domain, x, v, "forward")
    z = x + np.asarray(t)[..., None] * v
    return BoundaryPoint(z, v.copy(), classify(domain, z, v, tol_graze))


# ---------------------------------------------------------------------------
# travel-time gradients


def _footpoint(domain, x, omega, tol_graze):
    tau = exit_distance(domain, x, -np.asarray(omega, float))
    z = np.asarray(x) - np.asarray(tau)[..., None] * omega
    nz = normal(domain, z)
    c = np.sum(omega * nz, axis=-1)
    if np.any(np.abs(c) < tol_graze):
        raise GrazingError("backward chord ends at a grazing point")
    return tau, nz, c


def grad_tau_x(domain: Domain, x, omega, h, tol_graze=TOL_GRAZE):
    """Directional derivative of tau_minus(x, omega) along the boundary tangent h."""
    omega = np.asarray(omega, float)
    _, nz, c = _footpoint(domain, x, omega, tol_graze)
    return np.sum(np.asarray(h) * nz, axis=-1) / c


def grad_tau_omega(domain: Domain, x, omega, h, tol_graze=TOL_GRAZE):
    """Directional derivative of tau_minus(x, omega) along h tangent to the sphere at omega."""
    omega = np.asarray(omega, float)
    tau, nz, c = _footpoint(domain, x, omega, tol_graze)
    return OMEGA_GRADIENT_SIGN * tau * np.sum(np.asarray(h) * nz, axis=-1) / c


def calibrate_omega_sign(beta=0.7, step=1e-5):
    """Recompute the direction-gradient sign on the unit disk by central differences."""
    disk = Disk(1.0)
    x = np.array([1.0, 0.0])

    def tau(b):
        return exit_distance(disk, x, -np.array([np.cos(b), np.sin(b)]))

    fd = (tau(beta + step) - tau(beta - step)) / (2 * step)
    omega = np.array([np.cos(beta), np.sin(beta)])
    h = np.array([-np.sin(beta), np.cos(beta)])
    t, nz, c = _footpoint(disk, x, omega, TOL_GRAZE)
    unsigned = t * np.dot(h, nz) / c
    return float(np.sign(fd / unsigned))


# ---------------------------------------------------------------------------
# algebraic and measure-theoretic helpers


def det_rank_one_update(c, a, u):
    """Determinant of c*Id + a u^T, i.e. c^(d-1) (c + a.u)."""
    a = np.asarray(a, float)
    u = np.asarray(u, float)
    d = a.shape[-1]
    return c ** (d - 1) * (c + np.sum(a * u, axis=-1))


def sphere_area(d):
    """|S^{d-1}|."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def polar_jacobian(omega):
    """Angular Jacobian prod_{j=2}^{d-1} sin^{j-1}(theta_j) for unit vectors (..., d).

    Coordinates are taken in a frame whose last axis is -n, so the polar
    angle theta_{d-1} is measured from the inward direction.
    """
    omega = np.asarray(omega, float)
    d = omega.shape[-1]
    jac = np.ones(omega.shape[:-1])
    cum = np.sqrt(np.cumsum(omega * omega, axis=-1))
    for j in range(2, d):
        # sin(theta_j) = |omega_{1..j}| / |omega_{1..j+1}|
        full = cum[..., j]
        sin_t = np.where(full > 0, cum[..., j - 1] / np.where(full > 0, full, 1.0), 0.0)
        jac = jac * sin_t ** (j - 1)
    return jac


def degenerate_direction_measure(d, eps, samples=200_000, rng=None):
    """Monte Carlo estimate of sigma{omega incoming : polar Jacobian <= eps}.

    Returns ``(estimate, standard_error)``.  For d = 2 the Jacobian is an
    empty product, so the set is empty whenever eps < 1.
    """
    if d < 2:
        raise ValueError("dimension must be at least 2")
    area = sphere_area(d)
    if d == 2:
        return (0.0 if eps < 1 else area / 2.0), 0.0
    rng = np.random.default_rng(rng)
    g = rng.standard_normal((samples, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    inward = g[:, -1] > 0
    hit = inward & (polar_jacobian(g) <= eps)
    p = hit.mean()
    return area * p, area * math.sqrt(p * (1 - p) / samples)
