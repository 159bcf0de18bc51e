"""Fixed points of the trace operator M0 H and related diagnostics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..boundary import trend_verdict

POWER_TOL = 1e-10
POWER_MAX_ITER = 100_000
CESARO_SWITCH = 5_000
CESARO_TOL = 1e-6


class NoConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class EigenResult:
    lam: float
    phi: np.ndarray
    residual: float
    iterations: int
    status: str  # converged | cesaro | no-convergence
    diff_history: np.ndarray
    irreducible: bool | None = None

    @property
    def converged(self):
        return self.status in ("converged", "cesaro")

    @property
    def label(self):
        """Uniqueness is only claimed when the operator is irreducible."""
        return "the invariant density" if self.irreducible else "a fixed point"

    def oscillation_diagnostic(self):
        """Tail behaviour of successive-iterate distances: flat tails mean peripheral spectrum."""
        h = self.diff_history
        if h.size < 20:
            return {"tail_mean": float(h.mean()) if h.size else 0.0, "tail_ratio": 0.0}
        tail = h[-10:]
        return {"tail_mean": float(tail.mean()),
                "tail_ratio": float(tail[-1] / h[-20] if h[-20] > 0 else 0.0)}


def leading_eigenpair(op, tol=POWER_TOL, max_iter=POWER_MAX_ITER, x0=None, cesaro_after=CESARO_SWITCH,
                      cesaro_tol=CESARO_TOL, irreducible=None):
    """Power iteration on a nonnegative mass operator started from the uniform vector.

    Iterates are renormalised to unit mass, so the eigenvalue estimate is the
    mass gain of one application.  If plain iteration has not settled after
    ``cesaro_after`` steps, running averages of the iterates are tested as well.
    """
    n = op.shape[0]
    x = np.full(n, 1.0 / n) if x0 is None else np.asarray(x0, float) / np.sum(x0)
    hist = []
    lam = np.nan
    avg = None
    n_avg = 0
    status = "no-convergence"
    it = 0
    for it in range(1, max_iter + 1):
        y = op.matvec(x)
        s = y.sum()
        if not s > 0:
            raise ValueError("operator annihilated the iterate")
        lam = s / x.sum()
        y = y / s
        diff = float(np.abs(y - x).sum())
        hist.append(diff)
        x = y
        if diff < tol:
            status = "converged"
            break
        if it >= cesaro_after:
            avg = x.copy() if avg is None else avg + (x - avg) / (n_avg + 1)
            n_avg += 1
            if n_avg % 100 == 0:
                ya = op.matvec(avg)
                if np.abs(ya / ya.sum() - avg).sum() < cesaro_tol:
                    x = avg
                    lam = ya.sum() / avg.sum()
                    status = "cesaro"
                    break
    if status == "no-convergence":
        warnings.warn(f"power iteration did not converge in {max_iter} steps", NoConvergenceWarning)
    residual = float(np.abs(op.matvec(x) - lam * x).sum())
    return EigenResult(float(lam), x, residual, it, status, np.asarray(hist), irreducible)


def generic_start(n, seed=0):
    """Positive start vector without symmetries (uniform starts can be invariant under reflections)."""
    return np.random.default_rng(seed).uniform(0.5, 1.5, n)


def subdominant_modulus(op, phi, iters=300, seed=0):
    """|lambda_2| by power iteration on (I - phi 1^T) op, which removes the mass direction."""
    rng = np.random.default_rng(seed)
    phi = np.asarray(phi, float) / np.sum(phi)
    x = rng.standard_normal(op.shape[0])
    x -= phi * x.sum()
    nrm = np.linalg.norm(x)
    if nrm == 0:
        return 0.0
    x /= nrm
    logs = []
    for _ in range(iters):
        y = op.matvec(x)
        y -= phi * y.sum()
        nrm = np.linalg.norm(y)
        if nrm < 1e-300:
            return 0.0
        logs.append(np.log(nrm))
        x = y / nrm
    tail = np.asarray(logs[len(logs) // 2:])
    return float(np.exp(tail.mean()))


def inverse_speed_integral(phi, grid):
    """Sum of phi over cells weighted by the mu-average of 1/|v| in each speed cell."""
    inv = np.broadcast_to(grid.inv_speed_mean[None, :, None], (grid.nb, grid.ns, grid.nd)).ravel()
    return float(np.sum(phi * inv))


def additional_condition(solve_at, floors, cauchy_tol=1e-4):
    """Trend of int phi |v|^{-1} dmu_+ as the speed floor is lowered.

    ``solve_at(floor)`` returns ``(grid, phi)`` with phi a unit-mass fixed
    point on a grid whose lowest speed edge is ``floor``.  Values that settle
    give a finite verdict.
    """
    values = []
    for f in floors:
        grid, phi = solve_at(f)
        values.append(inverse_speed_integral(phi, grid))
    v = trend_verdict(values, cauchy_tol)
    verdict = {"convergent": "finite", "divergent": "divergent"}.get(v, "inconclusive")
    return {"verdict": verdict, "floors": list(floors), "values": values}
