"""Independent reference solutions and error metrics.

The pendulum reference comes from adaptive RK45 at tight tolerances; the
Allen-Cahn reference from periodic central differences in space with explicit
RK4 time stepping (semi-implicit fallback when the diffusion stability bound
would be violated). Both are verified by self-convergence checks in the test
suite rather than against the networks they are used to grade.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_circulant

from . import autodiff as ad


@dataclass
class ReferenceSolution:
    """Solution values on a fixed evaluation grid.

    1-D problems: grids = (t_grid,), values (nt, n_out).
    Space-time problems: grids = (t_grid, x_grid), values (nt, nx).
    """

    grids: tuple
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for g in self.grids:
            if np.any(np.diff(g) <= 0):
                raise ValueError("reference grid must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("reference values must be finite")

    @property
    def points(self):
        """Evaluation points as an (n, d) matrix matching values row order."""
        if len(self.grids) == 1:
            return self.grids[0][:, None]
        tg, xg = self.grids
        tt, xx = np.meshgrid(tg, xg, indexing="ij")
        return np.column_stack([xx.ravel(), tt.ravel()])  # model input is (x, t)

    @property
    def flat_values(self):
        v = self.values
        return v.reshape(-1, 1) if v.ndim == 2 and len(self.grids) == 2 else v


# ---------------------------------------------------------------------------
# pendulum
# ---------------------------------------------------------------------------

def pendulum_rhs(spec):
    b_over_m = spec.damping / spec.mass
    g_over_l = spec.gravity / spec.length
    if getattr(spec, "small_angle", False):
        return lambda t, s: (s[1], -b_over_m * s[1] - g_over_l * s[0])
    return lambda t, s: (s[1], -b_over_m * s[1] - g_over_l * np.sin(s[0]))


def rk45_pendulum(spec, t_grid, rtol=1e-9, atol=1e-11):
    """Dense RK45 solution of the damped pendulum on t_grid."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.min() < 0 or t_grid.max() > spec.t_end:
        raise ValueError("t_grid must lie inside [0, t_end]")
    sol = solve_ivp(pendulum_rhs(spec), (0.0, spec.t_end),
                    np.asarray(spec.initial_state, dtype=np.float64),
                    method="RK45", rtol=rtol, atol=atol, dense_output=True)
    if not sol.success:
        raise RuntimeError(f"pendulum integration failed: {sol.message}")
    values = sol.sol(t_grid).T
    return ReferenceSolution((t_grid,), values,
                             meta={"method": "RK45", "rtol": rtol, "atol": atol})


class SplineModel:
    """Piecewise-cubic interpolant of a reference trajectory, jet-evaluable.

    Polynomial evaluation uses only ops arithmetic, so residual operators can
    differentiate through it exactly like through a network.
    """

    def __init__(self, t_grid, values):
        self._breaks = np.asarray(t_grid, dtype=np.float64)
        self._spline = CubicSpline(self._breaks, np.asarray(values), axis=0)
        self.n_in = 1
        self.n_out = np.asarray(values).shape[1]

    @classmethod
    def from_reference(cls, ref):
        return cls(ref.grids[0], ref.values)

    def __call__(self, x):
        tv = np.asarray(x.value if isinstance(x, ad.Jet) else x, dtype=np.float64)
        idx = np.clip(np.searchsorted(self._breaks, tv[:, 0]) - 1,
                      0, self._breaks.size - 2)
        c = self._spline.c[:, idx, :]          # (4, n, n_out), highest power first
        dt = ad.sub(x, self._breaks[idx][:, None])
        out = c[0]
        for k in range(1, 4):
            out = ad.add(ad.mul(out, dt), c[k])
        return out


# ---------------------------------------------------------------------------
# Allen-Cahn
# ---------------------------------------------------------------------------

def _ac_rhs(u, c1_sq, inv_dx2):
    lap = (np.roll(u, -1) - 2.0 * u + np.roll(u, 1)) * inv_dx2
    return c1_sq * lap - 5.0 * u**3 + 5.0 * u


def ac_reference(spec, nx=512, dt=1e-3, n_snapshots=101):
    """Method-of-lines Allen-Cahn solution on a periodic grid over [-1, 1].

    Explicit RK4 when dt satisfies 0.4*dx^2/c1_sq, otherwise a semi-implicit
    step (exact circulant solve for diffusion, explicit reaction).
    """
    if nx < 256:
        raise ValueError("nx must be >= 256")
    dx = 2.0 / nx
    x_grid = -1.0 + dx * np.arange(nx)
    u = spec.initial_condition(x_grid)
    inv_dx2 = 1.0 / (dx * dx)
    c1_sq = spec.diffusion

    t_end = spec.t_end
    steps_total = int(round(t_end / dt))
    if abs(steps_total * dt - t_end) > 1e-12:
        steps_total = int(np.ceil(t_end / dt))
        dt = t_end / steps_total
    per_snap = max(1, steps_total // (n_snapshots - 1))
    steps_total = per_snap * (n_snapshots - 1)
    dt = t_end / steps_total

    explicit_ok = dt <= 0.4 * dx * dx / c1_sq
    method = "rk4" if explicit_ok else "imex"
    if not explicit_ok:
        # circulant diffusion operator for (I - dt*c1_sq*L) u_next = u + dt*f(u)
        col = np.zeros(nx)
        col[0] = 1.0 + 2.0 * dt * c1_sq * inv_dx2
        col[1] = -dt * c1_sq * inv_dx2
        col[-1] = -dt * c1_sq * inv_dx2
        circ = col

    t_grid = np.linspace(0.0, t_end, n_snapshots)
    values = np.empty((n_snapshots, nx))
    values[0] = u
    snap = 1
    for step in range(1, steps_total + 1):
        if explicit_ok:
            k1 = _ac_rhs(u, c1_sq, inv_dx2)
            k2 = _ac_rhs(u + 0.5 * dt * k1, c1_sq, inv_dx2)
            k3 = _ac_rhs(u + 0.5 * dt * k2, c1_sq, inv_dx2)
            k4 = _ac_rhs(u + dt * k3, c1_sq, inv_dx2)
            u = u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            rhs = u + dt * (-5.0 * u**3 + 5.0 * u)
            u = solve_circulant(circ, rhs)
        if np.max(np.abs(u)) > 10.0:
            raise RuntimeError(f"Allen-Cahn reference blew up at step {step}")
        if step % per_snap == 0:
            values[snap] = u
            snap += 1
    return ReferenceSolution((t_grid, x_grid), values,
                             meta={"method": method, "nx": nx, "dt": dt})


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _predict(pred_fn, points):
    if callable(pred_fn):
        out = pred_fn(points)
    else:
        out = pred_fn
    return np.asarray(out, dtype=np.float64)


def rmse(pred_fn, reference):
    """sqrt(mean over grid points of the squared error norm)."""
    pts = reference.points
    if pts.shape[0] == 0:
        raise ValueError("empty reference")
    preds = _predict(pred_fn, pts)
    ref = reference.flat_values
    if preds.shape != ref.shape:
        raise ValueError(f"prediction shape {preds.shape} != reference {ref.shape}")
    return float(np.sqrt(np.mean(np.sum((preds - ref) ** 2, axis=1))))


def relative_rmse(pred_fn, reference):
    """rmse normalized by the root-mean-square of the reference values."""
    ref = reference.flat_values
    norm = float(np.sqrt(np.mean(np.sum(ref**2, axis=1))))
    if norm == 0.0:
        raise ValueError("relative RMSE is undefined for an all-zero reference")
    return rmse(pred_fn, reference) / norm


def restrict_reference(ref, t_lo, t_hi):
    """Sub-reference with grid times inside [t_lo, t_hi]."""
    tg = ref.grids[0]
    mask = (tg >= t_lo - 1e-12) & (tg <= t_hi + 1e-12)
    if len(ref.grids) == 1:
        return ReferenceSolution((tg[mask],), ref.values[mask], dict(ref.meta))
    return ReferenceSolution((tg[mask], ref.grids[1]), ref.values[mask],
                             dict(ref.meta))


def export_csv(ref, path):
    """Tidy CSV of a reference solution (plot baselines, regression tests)."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if len(ref.grids) == 1:
            n_out = ref.values.shape[1]
            w.writerow(["t"] + [f"ref_{i}" for i in range(n_out)])
            for t, row in zip(ref.grids[0], ref.values):
                w.writerow([f"{t:.12g}"] + [f"{v:.12g}" for v in row])
        else:
            w.writerow(["t", "x", "ref"])
            tg, xg = ref.grids
            for i, t in enumerate(tg):
                for j, x in enumerate(xg):
                    w.writerow([f"{t:.12g}", f"{x:.12g}", f"{ref.values[i, j]:.12g}"])
