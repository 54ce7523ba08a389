"""Allen-Cahn benchmark: u_t - c1^2 u_xx + 5 u^3 - 5 u = 0 with periodic BCs.

Inputs are ordered (x, t). The initial condition is x^2 cos(pi x); periodicity
of u and u_x at x = +-1 enters the boundary loss as paired-point mismatches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..oracles import ReferenceSolution, ac_reference, relative_rmse, restrict_reference
from ..train import Batch, Box, sample_uniform


@dataclass(frozen=True)
class AllenCahnSpec:
    diffusion: float = 1e-4  # c1^2
    t_end: float = 1.0
    x_lo: float = -1.0
    x_hi: float = 1.0
    n_tasks: int = 4

    def __post_init__(self):
        if self.diffusion <= 0:
            raise ValueError("diffusion must be positive")
        if self.x_hi <= self.x_lo:
            raise ValueError("spatial domain is empty")
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")

    def initial_condition(self, x):
        return np.asarray(x) ** 2 * np.cos(np.pi * np.asarray(x))

    def task_boxes(self):
        """Time quarters (equal slices of [0, t_end]); space is never split."""
        width = self.t_end / self.n_tasks
        return [Box(np.array([self.x_lo, i * width]),
                    np.array([self.x_hi, (i + 1) * width]))
                for i in range(self.n_tasks)]


def allen_cahn_ic(x):
    """u(x, 0) = x^2 cos(pi x)."""
    return np.asarray(x, dtype=np.float64) ** 2 * np.cos(np.pi * np.asarray(x))


def allen_cahn_residual_terms(spec, model, pts):
    """Residual on (x, t) rows: jets order 2 in x and order 1 in t, one pass."""
    j = model(ad.jet_seed(pts, [(0, 2), (1, 1)]))
    u = j.value
    u_xx = j.parts[0][1]
    u_t = j.parts[1][0]
    cubic = ad.mul(ad.mul(ad.mul(u, u), u), 5.0)
    r = ad.add(ad.sub(ad.sub(u_t, ad.mul(u_xx, spec.diffusion)), ad.mul(u, 5.0)),
               cubic)
    return [r]


def allen_cahn_residual(model, x, t, spec=None):
    """Scalar residual u_t - c1^2 u_xx + 5u^3 - 5u at one point."""
    spec = spec or AllenCahnSpec()
    [r] = allen_cahn_residual_terms(spec, model, np.array([[float(x), float(t)]]))
    rv = r.value if isinstance(r, ad.Var) else np.asarray(r)
    return float(rv[0, 0])


def allen_cahn_bc_terms(model, ts, x_lo=-1.0, x_hi=1.0):
    """Periodic mismatches [u(x_hi,t)-u(x_lo,t), u_x(x_hi,t)-u_x(x_lo,t)]."""
    ts = np.atleast_2d(ts)
    left = np.column_stack([np.full(ts.shape[0], x_lo), ts[:, 0]])
    right = np.column_stack([np.full(ts.shape[0], x_hi), ts[:, 0]])
    jl = model(ad.jet_seed(left, [(0, 1)]))
    jr = model(ad.jet_seed(right, [(0, 1)]))
    return [ad.sub(jr.value, jl.value), ad.sub(jr.d1, jl.d1)]


def allen_cahn_ic_bc_batch(n_ic, n_bc, rng, t_range=(0.0, 1.0), spec=None):
    """IC points/targets at t=0 plus times for paired periodic-BC evaluations."""
    if n_ic < 1 or n_bc < 1:
        raise ValueError("n_ic and n_bc must be >= 1")
    spec = spec or AllenCahnSpec()
    x = rng.uniform(spec.x_lo, spec.x_hi, size=(n_ic, 1))
    ic_points = np.column_stack([x[:, 0], np.zeros(n_ic)])
    ic_targets = allen_cahn_ic(x)
    bc_times = rng.uniform(t_range[0], t_range[1], size=(n_bc, 1))
    return ic_points, ic_targets, bc_times


class AllenCahnProblem:
    """Training-side view of the Allen-Cahn benchmark."""

    metric_name = "relative_rmse"

    def __init__(self, spec=None, ref_nx=1024, eval_nx=256, eval_nt=101):
        self.spec = spec or AllenCahnSpec()
        self.task_domains = self.spec.task_boxes()
        self.full_domain = Box(np.array([self.spec.x_lo, 0.0]),
                               np.array([self.spec.x_hi, self.spec.t_end]))
        self._ref_nx = ref_nx
        self._eval_nx = eval_nx
        self._eval_nt = eval_nt
        self._reference = None

    @property
    def n_inputs(self):
        return 2

    @property
    def n_outputs(self):
        return 1

    def residual_fn(self, model, pts):
        return allen_cahn_residual_terms(self.spec, model, pts)

    def bc_fn(self, model, ts):
        return allen_cahn_bc_terms(model, ts, self.spec.x_lo, self.spec.x_hi)

    def sample_batch(self, task_index, sizes, rng):
        box = self.task_domains[task_index]
        t_lo, t_hi = float(box.lo[1]), float(box.hi[1])
        batch = Batch()
        if sizes.residual > 0:
            batch.residual_points = sample_uniform(box, sizes.residual, rng)
        if sizes.ic > 0 and sizes.bc > 0:
            ic_points, ic_targets, bc_times = allen_cahn_ic_bc_batch(
                sizes.ic, sizes.bc, rng, t_range=(t_lo, t_hi), spec=self.spec)
            batch.ic_points, batch.ic_targets = ic_points, ic_targets
            batch.bc_pair_times = bc_times
        return batch

    def mas_points(self, task_index, n, rng):
        return sample_uniform(self.task_domains[task_index], n, rng)

    def reference(self):
        """Reference restricted to the evaluation grid (eval_nx x eval_nt)."""
        if self._reference is None:
            full = ac_reference(self.spec, nx=self._ref_nx,
                                n_snapshots=self._eval_nt)
            stride = self._ref_nx // self._eval_nx
            self._reference = ReferenceSolution(
                (full.grids[0], full.grids[1][::stride]),
                full.values[:, ::stride], dict(full.meta))
        return self._reference

    def metric(self, model, box=None):
        """Relative RMSE over the space-time evaluation grid."""
        ref = self.reference()
        if box is not None:
            ref = restrict_reference(ref, float(box.lo[1]), float(box.hi[1]))
        return relative_rmse(model, ref)

    def metric_on_task(self, model, task_index):
        return self.metric(model, self.task_domains[task_index])
