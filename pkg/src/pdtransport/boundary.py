"""Partly diffuse boundary operators H = alpha R + (1 - alpha) K.

Velocities leaving the domain (outgoing) are turned into incoming velocities
either by a deterministic reflection law or by a draw from a diffuse kernel
k(x, v, v') normalised against mu_x(dv) = |v.n| m(dv) on the incoming half.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from . import geometry
from .geometry import TOL_GRAZE, sphere_area
from .vmeasure import (RadialSampler, VelocityMeasure, cosine_directions, half_sphere_flux)


class BoundaryError(ValueError):
    pass


class SamplerFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reflection


@dataclass(frozen=True)
class ReflectionLaw:
    """Deterministic reflection.  ``custom`` maps (n, v_out) to v_in."""

    kind: str = "specular"
    custom: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("specular", "bounce-back", "custom"):
            raise BoundaryError(f"unknown reflection law {self.kind!r}")
        if self.kind == "custom" and self.custom is None:
            raise BoundaryError("custom reflection needs a map")

    def apply(self, n, v):
        v = np.asarray(v, float)
        if self.kind == "specular":
            return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n
        if self.kind == "bounce-back":
            return -v
        return self.custom(n, v)


def reflect(law: ReflectionLaw, domain, x, v_out):
    """Incoming velocity produced by ``law`` at boundary point x."""
    return law.apply(geometry.normal(domain, x), v_out)


# ---------------------------------------------------------------------------
# diffuse kernels


def _log1p_exp_inv(t):
    """log(e + e^{-t}) computed without overflow."""
    return np.logaddexp(1.0, -np.asarray(t, float))


class DiffuseKernel:
    """Interface.  ``separable`` kernels do not depend on the outgoing velocity."""

    separable = True
    isotropic = False
    measure: VelocityMeasure

    def density(self, x, n, v, vp=None):
        raise NotImplementedError

    def column_mass(self, x, n, vp=None, lo=0.0, hi=math.inf):
        """int over incoming v with lo < |v| <= hi of k(x, v, v') mu_x(dv)."""
        return _generic_column_mass(self, x, n, vp, lo, hi)

    def sample(self, x, n, frame, vp, stream, first_draw=1):
        return _rejection_sample(self, x, n, frame, vp, stream, first_draw)


class IsotropicKernel(DiffuseKernel):
    """k(x, v, v') = exp(log_k(log|v|)) independent of x, v' and of the direction of v.

    With ``normalize`` the constant is fixed so that the kernel integrates to
    one against mu_x on the incoming half space.
    """

    isotropic = True

    def __init__(self, measure: VelocityMeasure, log_k: Callable, hi=math.inf, normalize=True,
                 name="isotropic", floor=1e-100):
        self.measure = measure
        self.name = name
        self.floor = floor
        self.hi = min(hi, measure.rho_max)
        self._log_raw = log_k
        self.log_scale = 0.0
        if normalize:
            z = self._raw_flux(0.0, self.hi)
            if not z > 0 or not math.isfinite(z):
                raise BoundaryError(f"kernel {name} cannot be normalised (integral {z})")
            self.log_scale = -math.log(z)
        self._sampler = None

    # log k as a function of t = log(rho)
    def log_k(self, t):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            val = self._log_raw(t) + self.log_scale
        return np.where(np.exp(t) <= self.hi * (1 + 1e-15), val, -np.inf)

    def profile(self, rho):
        rho = np.asarray(rho, float)
        with np.errstate(divide="ignore"):
            return np.exp(self.log_k(np.log(rho)))

    def density(self, x, n, v, vp=None):
        return self.profile(np.linalg.norm(v, axis=-1))

    def _raw_flux(self, lo, hi, power=1.0):
        """(A_d/|S|) int_lo^hi f(rho) rho^power m0(drho) for the unscaled profile."""
        m = self.measure
        ang = half_sphere_flux(m.dim) / m.sphere
        if m.is_atomic:
            tot = 0.0
            for r, mass in m.atoms:
                if lo < r <= hi or (lo == 0 and r <= hi):
                    tot += math.exp(float(self._log_raw(np.array(math.log(r))))) * r ** power * mass
            return ang * tot
        lo = max(lo, m.rho_min)
        hi = min(hi, m.rho_max)
        if hi <= lo:
            return 0.0

        def f(t):
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                val = float(self._log_raw(np.array(t))) + power * t + float(m.log_density(np.array(t))) + t
            if not np.isfinite(val):
                return math.inf if val > 0 else 0.0
            return math.exp(val) if val < 700 else math.inf

        a = math.log(lo) if lo > 0 else -np.inf
        b = math.log(hi)
        if a == -np.inf:
            # split so quad sees the bulk on a finite piece
            mid = b - 40.0
            v1, _ = integrate.quad(f, -np.inf, mid, limit=400)
            v2, _ = integrate.quad(f, mid, b, limit=400)
            return ang * (v1 + v2)
        pts = np.linspace(a, b, 9)
        return ang * sum(integrate.quad(f, pts[i], pts[i + 1], limit=200)[0] for i in range(8))

    def flux(self, lo=0.0, hi=math.inf, power=1.0):
        """(A_d/|S|) int_lo^hi k(rho) rho^power m0(drho) for the normalised kernel."""
        return math.exp(self.log_scale) * self._raw_flux(lo, min(hi, self.hi), power)

    def column_mass(self, x=None, n=None, vp=None, lo=0.0, hi=math.inf):
        val = self.flux(lo, hi)
        if n is None:
            return val
        return np.full(np.shape(n)[:-1], val)

    @property
    def speed_sampler(self):
        if self._sampler is None:
            self._sampler = RadialSampler(self.measure, lambda t: self.log_k(t) + t,
                                          hi=self.hi, floor=self.floor)
        return self._sampler

    def sample_speed(self, u):
        return self.speed_sampler(u)

    def sample(self, x, n, frame, vp, stream, first_draw=1):
        speed = self.sample_speed(stream.draw(first_draw))
        u = np.stack([stream.draw(first_draw + 1 + k) for k in range(n.shape[-1] - 1)], axis=-1)
        w = cosine_directions(-n, frame, u)
        return speed[..., None] * w


def maxwellian_log_profile(dim, theta):
    c = -0.5 * dim * math.log(2.0 * math.pi * theta)
    return lambda t: c - np.exp(2.0 * np.asarray(t)) / (2.0 * theta)


class MaxwellKernel(DiffuseKernel):
    """k = M(v)/gamma with M the Maxwellian at wall temperature theta(x)."""

    isotropic = True

    def __init__(self, measure: VelocityMeasure, theta=1.0):
        self.measure = measure
        self.theta = theta
        if not callable(theta) and theta <= 0:
            raise BoundaryError("theta must be positive")

    @lru_cache(maxsize=256)
    def _at(self, theta):
        return IsotropicKernel(self.measure, maxwellian_log_profile(self.measure.dim, theta),
                               name=f"maxwell(theta={theta})")

    def _theta_values(self, x):
        if callable(self.theta):
            # cache at config-grid resolution
            return np.round(np.asarray(self.theta(x), float), 10)
        return np.full(np.shape(x)[:-1], float(self.theta))

    def gamma(self, theta=None):
        """gamma = int_{u.n<0} M(u)|u.n| m(du)."""
        th = float(self.theta) if theta is None else float(theta)
        return math.exp(-self._at(th).log_scale)

    def _dispatch(self, x, fn):
        th = self._theta_values(x)
        out = None
        for val in np.unique(th):
            sel = th == val
            res = fn(self._at(float(val)), sel)
            if out is None:
                out = np.zeros(th.shape + np.shape(res)[1:]) if np.ndim(res) else np.zeros(th.shape)
            out[sel] = res
        return out

    def density(self, x, n, v, vp=None):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        if not callable(self.theta):
            return self._at(float(self.theta)).density(x, n, v)
        return self._dispatch(x, lambda k, sel: k.density(x[sel], None, v[sel]))

    def profile(self, rho, theta=None):
        return self._at(float(self.theta) if theta is None else theta).profile(rho)

    def kernel_at(self, theta=None):
        return self._at(float(self.theta) if theta is None else float(theta))

    def column_mass(self, x=None, n=None, vp=None, lo=0.0, hi=math.inf):
        if x is None or not callable(self.theta):
            val = self._at(float(self.theta) if not callable(self.theta) else 1.0).flux(lo, hi)
            return val if n is None else np.full(np.shape(n)[:-1], val)
        x = np.asarray(x, float)
        return self._dispatch(x, lambda k, sel: k.flux(lo, hi))

    def sample(self, x, n, frame, vp, stream, first_draw=1):
        if not callable(self.theta):
            return self._at(float(self.theta)).sample(x, n, frame, vp, stream, first_draw)
        x = np.asarray(x, float)
        th = self._theta_values(x)
        out = np.zeros_like(n)
        for val in np.unique(th):
            sel = th == val
            out[sel] = self._at(float(val)).sample(x[sel], n[sel], frame[sel], None,
                                                   stream.subset(sel), first_draw)
        return out


def maxwell_kernel(measure: VelocityMeasure, v, theta=1.0):
    """Value M(v)/gamma; independent of position (for constant theta) and of v'."""
    return MaxwellKernel(measure, theta).density(None, None, np.asarray(v, float))


def heavy_lowspeed_log_profile(p, q):
    return lambda t: -p * np.asarray(t) - q * np.log(_log1p_exp_inv(t))


def HeavyLowSpeedKernel(measure: VelocityMeasure, p=3.0, q=2.0, cutoff=1.0):
    """k = c |v|^{-p} log^{-q}(e + 1/|v|) on |v| <= cutoff."""
    return IsotropicKernel(measure, heavy_lowspeed_log_profile(p, q), hi=cutoff,
                           name=f"heavy-low-speed(p={p},q={q})")


class FunctionKernel(DiffuseKernel):
    """Arbitrary kernel func(n, v, vp); normalisation optional and done by quadrature."""

    def __init__(self, measure, func, separable=False, bound=None, normalize=False, n_speed=48,
                 n_angle=48):
        self.measure = measure
        self.func = func
        self.separable = separable
        self.bound = bound
        self.normalize = normalize
        self.n_speed = n_speed
        self.n_angle = n_angle

    def density(self, x, n, v, vp=None):
        val = self.func(n, v, vp)
        if self.normalize:
            val = val / _generic_column_mass(FunctionKernel(self.measure, self.func, n_speed=self.n_speed,
                                                            n_angle=self.n_angle), x, n, vp, 0, math.inf)
        return val


class TabulatedKernel(DiffuseKernel):
    """Piecewise constant in (|v|, |cos(angle to n)|), independent of v'."""

    def __init__(self, measure, speed_edges, cos_edges, values):
        self.measure = measure
        self.speed_edges = np.asarray(speed_edges, float)
        self.cos_edges = np.asarray(cos_edges, float)
        vals = np.asarray(values, float)
        if vals.shape != (len(self.speed_edges) - 1, len(self.cos_edges) - 1) or np.any(vals < 0):
            raise BoundaryError("table shape mismatch or negative entries")
        raw = FunctionKernel(measure, self._raw, separable=True)
        n0 = np.zeros(measure.dim)
        n0[0] = 1.0
        z = float(_generic_column_mass(raw, None, n0[None, :], None, 0, math.inf)[0])
        if z <= 0:
            raise BoundaryError("table has zero mass")
        self.values = vals / z
        self.bound = float(self.values.max())

    def _raw(self, n, v, vp=None):
        return self._lookup(n, v, None)

    def _lookup(self, n, v, vals):
        vals = getattr(self, "values", None) if vals is None else vals
        if vals is None:
            vals = np.ones((len(self.speed_edges) - 1, len(self.cos_edges) - 1))
        rho = np.linalg.norm(v, axis=-1)
        c = np.abs(np.sum(v * n, axis=-1)) / np.where(rho > 0, rho, 1.0)
        i = np.searchsorted(self.speed_edges, rho, side="right") - 1
        j = np.clip(np.searchsorted(self.cos_edges, c, side="right") - 1, 0, len(self.cos_edges) - 2)
        ok = (i >= 0) & (i < len(self.speed_edges) - 1)
        return np.where(ok, vals[np.clip(i, 0, vals.shape[0] - 1), j], 0.0)

    def density(self, x, n, v, vp=None):
        return self._lookup(n, v, self.values)


def _incoming_nodes(kernel, n, n_speed, n_angle, lo=0.0, hi=math.inf):
    """Quadrature nodes/weights for mu_x on the incoming half at normals n (m, d)."""
    m = kernel.measure
    r, wr = m.radial_nodes(max(lo, m.rho_min), min(hi, m.rho_max), per_decade=n_speed)
    if m.is_atomic:
        keep = (r > lo) | (lo == 0)
        r, wr = r[keep], wr[keep]
    d = m.dim
    n = np.atleast_2d(n)
    nn, frame = _frame_from_normals(n)
    g, gw = np.polynomial.legendre.leggauss(n_angle)
    if d == 2:
        psi = 0.5 * np.pi * g
        wpsi = 0.5 * np.pi * gw * np.cos(psi)
        loc = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
        wloc = wpsi
    else:
        s = 0.5 * (g + 1.0)
        ws = 0.25 * gw  # d(sin^2)/2 over [0,1]
        nphi = 2 * n_angle
        ph = 2 * np.pi * (np.arange(nphi) + 0.5) / nphi
        S, P = np.meshgrid(s, ph, indexing="ij")
        c = np.sqrt(1 - S)
        sn = np.sqrt(S)
        loc = np.stack([c, sn * np.cos(P), sn * np.sin(P)], axis=-1).reshape(-1, 3)
        wloc = np.repeat(ws, nphi) * (2 * np.pi / nphi)
    # global directions: -n * loc0 + tangents * loc1..
    dirs = -loc[None, :, 0:1] * nn[:, None, :]
    for k in range(d - 1):
        dirs = dirs + loc[None, :, k + 1:k + 2] * frame[:, None, k, :]
    vel = r[None, :, None, None] * dirs[:, None, :, :]
    w = (wr[:, None] * r[:, None] * wloc[None, :]) / m.sphere
    return vel, np.broadcast_to(w, vel.shape[:-1])


def _frame_from_normals(n):
    n = np.asarray(n, float)
    if n.shape[-1] == 2:
        return n, np.stack([-n[..., 1], n[..., 0]], axis=-1)[..., None, :]
    ref = np.zeros_like(n)
    ref[..., 2] = 1.0
    ref[np.abs(n[..., 2]) > 0.9] = np.array([1.0, 0.0, 0.0])
    t1 = np.cross(ref, n)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    return n, np.stack([t1, np.cross(n, t1)], axis=-2)


def _generic_column_mass(kernel, x, n, vp, lo, hi):
    n = np.atleast_2d(np.asarray(n, float))
    vel, w = _incoming_nodes(kernel, n, getattr(kernel, "n_speed", 48), getattr(kernel, "n_angle", 48), lo, hi)
    shp = vel.shape
    flat = vel.reshape(shp[0], -1, shp[-1])
    nb = np.broadcast_to(n[:, None, :], flat.shape)
    vpb = None if vp is None else np.broadcast_to(np.atleast_2d(vp)[:, None, :], flat.shape)
    xb = None if x is None else np.broadcast_to(np.atleast_2d(x)[:, None, :], flat.shape)
    vals = kernel.density(xb, nb, flat, vpb).reshape(shp[:-1])
    return np.sum(vals * w, axis=(1, 2))


def _rejection_sample(kernel, x, n, frame, vp, stream, first_draw, max_rounds=2000):
    """Cosine-law proposal with speeds from the flux-weighted measure, then rejection."""
    bound = getattr(kernel, "bound", None)
    if bound is None:
        raise SamplerFailure("rejection sampling needs a kernel bound")
    m = kernel.measure
    sampler = RadialSampler(m, lambda t: t)  # speed density ~ rho m0
    d = n.shape[-1]
    out = np.zeros(n.shape)
    todo = np.arange(n.shape[0])
    draw = first_draw
    for _ in range(max_rounds):
        if todo.size == 0:
            return out
        sub = stream.subset(todo)
        speed = sampler(sub.draw(draw))
        u = np.stack([sub.draw(draw + 1 + k) for k in range(d - 1)], axis=-1)
        v = speed[:, None] * cosine_directions(-n[todo], frame[todo], u)
        acc = sub.draw(draw + d) * bound <= kernel.density(None if x is None else x[todo], n[todo], v,
                                                           None if vp is None else vp[todo])
        out[todo[acc]] = v[acc]
        todo = todo[~acc]
        draw += d + 1
    raise SamplerFailure(f"{todo.size} draws exhausted the rejection budget")


def truncate_kernel(kernel: DiffuseKernel, level):
    """K_m with k_m = min(k, m 1_{|v| <= m}); not normalised."""
    if level < 1:
        raise BoundaryError("truncation level must be >= 1")
    if kernel.isotropic:
        base = kernel.kernel_at() if isinstance(kernel, MaxwellKernel) else kernel
        lm = math.log(level)
        return IsotropicKernel(base.measure, lambda t: np.minimum(base.log_k(t), lm),
                               hi=min(base.hi, level), normalize=False, name=f"{base.name}|m={level}")

    def func(n, v, vp):
        rho = np.linalg.norm(v, axis=-1)
        return np.where(rho <= level, np.minimum(kernel.density(None, n, v, vp), level), 0.0)

    return FunctionKernel(kernel.measure, func, separable=kernel.separable,
                          bound=min(getattr(kernel, "bound", level) or level, level))


def lowspeed_renormalize(kernel: DiffuseKernel, level, x=None, n=None, vp=None):
    """K_n = k 1_{|v| > 1/n} / beta_n.  Returns (beta_n values, K_n)."""
    if level < 1:
        raise BoundaryError("level must be >= 1")
    cut = 1.0 / level
    if kernel.isotropic:
        base = kernel.kernel_at() if isinstance(kernel, MaxwellKernel) else kernel
        beta = base.flux(cut, math.inf)
        if beta < 1e-12:
            raise BoundaryError("beta_n vanishes: kernel lives below the cutoff")
        kn = IsotropicKernel(base.measure,
                             lambda t: np.where(np.exp(t) > cut, base.log_k(t), -np.inf),
                             hi=base.hi, normalize=True, name=f"{base.name}|n={level}")
        shape = () if n is None else np.shape(n)[:-1]
        return np.full(shape, beta), kn
    if n is None:
        raise BoundaryError("non-isotropic kernels need quadrature normals")
    beta = _generic_column_mass(kernel, x, n, vp, cut, math.inf)
    if np.any(beta < 1e-12):
        raise BoundaryError("beta_n vanishes at some quadrature point")

    def func(nn, v, vpp):
        rho = np.linalg.norm(v, axis=-1)
        return np.where(rho > cut, kernel.density(None, nn, v, vpp), 0.0)

    kn = FunctionKernel(kernel.measure, func, separable=kernel.separable, normalize=True)
    return beta, kn


# ---------------------------------------------------------------------------
# accommodation coefficient and the full operator


@dataclass(frozen=True)
class AlphaField:
    """alpha(x): constant, two patches split by the sign of x[axis], or tabulated by polar angle."""

    kind: str = "constant"
    value: float = 0.0
    values: tuple = ()
    axis: int = 0

    def __post_init__(self):
        vals = self.all_values()
        if any(not 0.0 <= a <= 1.0 for a in vals):
            raise BoundaryError("alpha must lie in [0, 1]")
        if self.kind not in ("constant", "two-patch", "tabulated"):
            raise BoundaryError(f"unknown alpha kind {self.kind!r}")
        if self.kind == "two-patch" and len(self.values) != 2:
            raise BoundaryError("two-patch alpha needs two values")

    def all_values(self):
        return (self.value,) if self.kind == "constant" else tuple(self.values)

    def __call__(self, x):
        x = np.asarray(x, float)
        shape = x.shape[:-1]
        if self.kind == "constant":
            return np.full(shape, float(self.value))
        if self.kind == "two-patch":
            return np.where(x[..., self.axis] >= 0, self.values[0], self.values[1])
        th = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * np.pi)
        k = len(self.values)
        idx = np.minimum((th / (2 * np.pi) * k).astype(int), k - 1)
        return np.asarray(self.values)[idx]

    def sup(self):
        return max(self.all_values())

    def inf(self):
        return min(self.all_values())


@dataclass
class PartlyDiffuseBoundary:
    alpha: AlphaField
    reflection: ReflectionLaw
    kernel: Optional[DiffuseKernel]

    def __post_init__(self):
        if self.kernel is None and self.alpha.inf() < 1.0:
            raise BoundaryError("a diffuse part needs a kernel")

    @property
    def alpha_sup(self):
        return self.alpha.sup()

    @property
    def beta_inf(self):
        return 1.0 - self.alpha.sup()

    @property
    def beta_sup(self):
        return 1.0 - self.alpha.inf()


def sample_post_collision(H: PartlyDiffuseBoundary, domain, x, vp, stream, tol_graze=TOL_GRAZE,
                          max_retries=64):
    """Incoming velocities after a wall hit at x for outgoing vp.

    Draw 0 picks the branch, later draws feed the samplers.  Grazing or
    zero-probability outcomes are redrawn with fresh draw indices.
    """
    x = np.asarray(x, float)
    vp = np.asarray(vp, float)
    n, frame = geometry.tangent_frame(domain, x)
    a = H.alpha(x)
    diffuse = stream.draw(0) >= a
    out = H.reflection.apply(n, vp)
    if np.any(diffuse):
        idx = np.nonzero(diffuse)[0]
        first = 1
        for _ in range(max_retries):
            sub = stream.subset(idx)
            v = H.kernel.sample(x[idx], n[idx], frame[idx], vp[idx], sub, first)
            rho = np.linalg.norm(v, axis=-1)
            cosv = -np.sum(v * n[idx], axis=-1) / np.where(rho > 0, rho, 1.0)
            ok = (cosv > tol_graze) | (rho == 0)
            out[idx[ok]] = v[ok]
            idx = idx[~ok]
            if idx.size == 0:
                break
            first += 64
        if idx.size:
            raise SamplerFailure("diffuse sampler keeps returning grazing velocities")
    return out, diffuse


# ---------------------------------------------------------------------------
# predicates and probes


def oscillation_predicate(beta):
    """Essential-radius bound (1 + osc beta)^2 - beta_sup^2 and the sufficient condition."""
    beta = np.asarray(beta, float)
    b_inf = float(beta.min())
    b_sup = float(beta.max())
    osc = b_sup - b_inf
    bound = (1.0 + osc) ** 2 - b_sup ** 2
    threshold = 1.0 + b_sup - math.sqrt(1.0 + b_sup ** 2)
    return {"bound": bound, "predicate": bool(b_inf > threshold), "beta_inf": b_inf,
            "beta_sup": b_sup, "osc": osc, "threshold": threshold}


def trend_verdict(values, cauchy_tol=1e-4, growth=2.0, slope_min=0.05, x=None):
    """Verdict on a sequence of integrals over shrinking speed floors.

    Divergent if the last value is not finite, at least doubles the one two
    refinements back, or the least-squares slope of log(value) against ``x``
    (octaves below the top floor; default the level index) over the second
    half of the sequence exceeds ``slope_min``.  Convergent if the last two
    values agree within ``cauchy_tol`` relative.  Otherwise inconclusive.
    """
    v = np.asarray(values, float)
    if v.size and not np.isfinite(v[-1]):
        return "divergent"
    if v.size >= 3 and v[-1] >= growth * v[-3] > 0:
        return "divergent"
    half = v.size // 2
    if v.size - half >= 3 and np.all(v[half:] > 0):
        xs = np.arange(v.size, dtype=float) if x is None else np.asarray(x, float)
        if np.polyfit(xs[half:], np.log(v[half:]), 1)[0] > slope_min:
            return "divergent"
    if v.size >= 2 and abs(v[-1] - v[-2]) <= cauchy_tol * abs(v[-1]):
        return "convergent"
    return "inconclusive"


def _half_space_angles(dim, n_angle):
    """Local incoming directions (cos to -n, tangential parts) with weights of |w.n| sigma."""
    g, gw = np.polynomial.legendre.leggauss(n_angle)
    if dim == 2:
        psi = 0.5 * np.pi * g
        loc = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
        return loc, 0.5 * np.pi * gw * np.cos(psi)
    s = 0.5 * (g + 1.0)
    nphi = 2 * n_angle
    ph = 2 * np.pi * (np.arange(nphi) + 0.5) / nphi
    S, P = np.meshgrid(s, ph, indexing="ij")
    loc = np.stack([np.sqrt(1 - S), np.sqrt(S) * np.cos(P), np.sqrt(S) * np.sin(P)], axis=-1).reshape(-1, 3)
    return loc, np.repeat(0.25 * gw, nphi) * (2 * np.pi / nphi)


def sweeping_divergence_probe(kernel, domain, x, vp=None, levels=None, n_angle=64,
                              cauchy_tol=1e-4):
    """Integral of k tau_+ against mu_x over |v| > 2^{-j} for each level j.

    The integrand separates for isotropic kernels: the radial factor carries
    the 1/|v| of tau_+(x, v) = tau_+(x, w)/|v|.  Isotropic kernels default to
    160 levels, enough for integrands of order 1/(rho log^2 rho) to pass the
    Cauchy test; other kernels default to 40.
    """
    if levels is None:
        levels = range(1, 161) if kernel.isotropic else range(1, 41)
    x = np.asarray(x, float)
    n, frame = geometry.tangent_frame(domain, x)
    loc, wl = _half_space_angles(domain.dim, n_angle)
    dirs = -loc[:, :1] * n
    for k in range(domain.dim - 1):
        dirs = dirs + loc[:, k + 1:k + 2] * frame[k]
    tau = geometry.exit_distance(domain, np.broadcast_to(x, dirs.shape), dirs)
    levels = list(levels)
    values = []
    if kernel.isotropic:
        base = kernel.kernel_at() if isinstance(kernel, MaxwellKernel) else kernel
        ang = float(np.sum(tau * wl)) / half_sphere_flux(domain.dim)
        # flux(power=0) carries (A/|S|) int k rho^0 m0, i.e. k |v.n| / |v| integrated radially
        for j in levels:
            values.append(ang * base.flux(2.0 ** (-j), math.inf, power=0.0))
    else:
        m = kernel.measure
        for j in levels:
            r, wr = m.radial_nodes(max(2.0 ** (-j), m.rho_min), m.rho_max, per_decade=32)
            vel = r[:, None, None] * dirs[None, :, :]
            flat = vel.reshape(-1, domain.dim)
            nb = np.broadcast_to(n, flat.shape)
            vpb = None if vp is None else np.broadcast_to(vp, flat.shape)
            k = kernel.density(np.broadcast_to(x, flat.shape), nb, flat, vpb).reshape(vel.shape[:-1])
            values.append(float(np.sum(k * (wr[:, None] / m.sphere) * wl[None, :] * tau[None, :])))
    verdict = trend_verdict(values, cauchy_tol, x=levels)
    return {"verdict": verdict, "floors": [2.0 ** (-j) for j in levels], "values": values}


def radial_divergence_oracle(dim, p, q):
    """Analytic answer for the heavy kernel: is int k tau_+ dmu_x infinite near v = 0?

    Near zero the integrand is rho^{d-1-p} log^{-q}(1/rho) in d rho.
    """
    e = dim - p
    if e > 0:
        return "convergent"
    if e < 0:
        return "divergent"
    return "divergent" if q <= 1 else "convergent"


def diffuseness_probe(kernel, domain, n_probes=32, rng=None, deltas=(0.2, 0.1, 0.05, 0.02),
                      n_candidates=32, n_check=48, n_positivity=4096, points=None):
    """Search for balls around (v0, v0') where k > 0 (WLD) or k >= delta (SLD).

    Probe positions are random boundary points unless ``points`` is given.
    """
    rng = np.random.default_rng(rng)
    m = kernel.measure
    d = domain.dim
    charts = domain.charts()
    speeds = RadialSampler(m, lambda t: t)
    report = {"probes": []}

    def project(v):
        rho = np.linalg.norm(v, axis=-1, keepdims=True)
        if m.is_atomic:
            atoms = np.array([r for r, _ in m.atoms])
            tgt = atoms[np.argmin(np.abs(rho - atoms[None, :]), axis=-1)]
        else:
            tgt = np.clip(rho, max(m.rho_min, 1e-12), m.rho_max)
        return v / np.where(rho > 0, rho, 1.0) * tgt

    def ball(center, delta, k):
        g = rng.standard_normal((k, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        rad = delta * rng.random(k) ** (1.0 / d)
        return project(center + rad[:, None] * g)

    for i in range(n_probes if points is None else len(points)):
        if points is None:
            ch = charts[rng.integers(len(charts))]
            x = ch.point(rng.random((1, d - 1)))[0]
        else:
            x = np.asarray(points[i], float)
        n, frame = geometry.tangent_frame(domain, x)
        vp0 = speeds(rng.random()) * cosine_directions(n, frame, rng.random(d - 1))
        cands = speeds(rng.random(n_candidates))[:, None] * cosine_directions(
            np.broadcast_to(-n, (n_candidates, d)), np.broadcast_to(frame, (n_candidates,) + frame.shape),
            rng.random((n_candidates, d - 1)))
        wld = sld = False
        for delta in deltas:
            for v0 in cands:
                vin = ball(v0, delta, n_check)
                vout = ball(vp0, delta, n_check)
                ok = (vin @ n < 0) & (vout @ n > 0)
                if not np.any(ok):
                    continue
                k = kernel.density(np.broadcast_to(x, vin[ok].shape), np.broadcast_to(n, vin[ok].shape),
                                   vin[ok], vout[ok])
                if np.all(k > 0):
                    wld = True
                if np.all(k >= delta):
                    sld = True
                if wld and sld:
                    break
            if wld and sld:
                break
        report["probes"].append({"x": x.tolist(), "v_out": vp0.tolist(), "wld": wld, "sld": sld})
    # global positivity rate for the irreducibility criterion
    ch_idx = rng.integers(len(charts), size=n_positivity)
    xs = np.zeros((n_positivity, d))
    for k, ch in enumerate(charts):
        sel = ch_idx == k
        xs[sel] = ch.point(rng.random((int(sel.sum()), d - 1)))
    ns, frames = geometry.tangent_frame(domain, xs)
    vin = speeds(rng.random(n_positivity))[:, None] * cosine_directions(-ns, frames, rng.random((n_positivity, d - 1)))
    vout = speeds(rng.random(n_positivity))[:, None] * cosine_directions(ns, frames, rng.random((n_positivity, d - 1)))
    pos = kernel.density(xs, ns, vin, vout) > 0
    report["wld"] = all(p["wld"] for p in report["probes"])
    report["sld"] = all(p["sld"] for p in report["probes"])
    report["wld_fraction"] = float(np.mean([p["wld"] for p in report["probes"]]))
    report["sld_fraction"] = float(np.mean([p["sld"] for p in report["probes"]]))
    report["positivity_rate"] = float(pos.mean())
    return report
