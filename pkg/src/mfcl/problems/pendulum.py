"""Damped gravity pendulum benchmark: s1' = s2, s2' = -(b/m) s2 - (g/L) sin s1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..oracles import restrict_reference, rk45_pendulum, rmse
from ..train import Batch, Box, sample_uniform


@dataclass(frozen=True)
class PendulumSpec:
    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.05
    gravity: float = 9.81
    t_end: float = 10.0
    initial_state: tuple = (1.0, 1.0)
    n_tasks: int = 5
    small_angle: bool = False  # linearized variant used by oracle checks

    def __post_init__(self):
        for name in ("mass", "length", "gravity", "t_end"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")

    def task_boxes(self):
        """Equal time subdomains tiling [0, t_end]."""
        width = self.t_end / self.n_tasks
        return [Box(np.array([i * width]), np.array([(i + 1) * width]))
                for i in range(self.n_tasks)]


def pendulum_residual_terms(spec, model, pts):
    """Residual components on a batch of times pts (n, 1); jet order 1 in t."""
    j = model(ad.jet_seed(pts, [(0, 1)]))
    s1 = ad.slice_cols(j.value, 0, 1)
    s2 = ad.slice_cols(j.value, 1, 2)
    ds1 = ad.slice_cols(j.d1, 0, 1)
    ds2 = ad.slice_cols(j.d1, 1, 2)
    b_over_m = spec.damping / spec.mass
    g_over_l = spec.gravity / spec.length
    angle = s1 if spec.small_angle else ad.sin(s1)
    r1 = ad.sub(ds1, s2)
    r2 = ad.add(ds2, ad.add(ad.mul(s2, b_over_m), ad.mul(angle, g_over_l)))
    return [r1, r2]


def pendulum_residual(model, t, spec=None):
    """Residual 2-vector (r1, r2) of the governing ODE at a single time."""
    spec = spec or PendulumSpec()
    terms = pendulum_residual_terms(spec, model, np.array([[float(t)]]))
    vals = [tt.value if isinstance(tt, ad.Var) else np.asarray(tt) for tt in terms]
    return np.array([vals[0][0, 0], vals[1][0, 0]])


class PendulumProblem:
    """Training-side view of the pendulum benchmark for the continual loop."""

    metric_name = "rmse"

    def __init__(self, spec=None, eval_grid=1001):
        self.spec = spec or PendulumSpec()
        self.task_domains = self.spec.task_boxes()
        self.full_domain = Box(np.array([0.0]), np.array([self.spec.t_end]))
        self._eval_grid = eval_grid
        self._reference = None

    @property
    def n_inputs(self):
        return 1

    @property
    def n_outputs(self):
        return 2

    def residual_fn(self, model, pts):
        return pendulum_residual_terms(self.spec, model, pts)

    bc_fn = None

    def sample_batch(self, task_index, sizes, rng):
        """Fresh batch: uniform residual points in the task box, IC anchor at t=0."""
        box = self.task_domains[task_index]
        batch = Batch()
        if sizes.residual > 0:
            batch.residual_points = sample_uniform(box, sizes.residual, rng)
        if sizes.ic > 0:
            batch.ic_points = np.zeros((sizes.ic, 1))
            batch.ic_targets = np.tile(np.asarray(self.spec.initial_state), (sizes.ic, 1))
        return batch

    def mas_points(self, task_index, n, rng):
        return sample_uniform(self.task_domains[task_index], n, rng)

    def reference(self):
        if self._reference is None:
            t_grid = np.linspace(0.0, self.spec.t_end, self._eval_grid)
            self._reference = rk45_pendulum(self.spec, t_grid)
        return self._reference

    def metric(self, model, box=None):
        """Full-domain (or box-restricted) RMSE against the RK45 reference."""
        ref = self.reference()
        if box is not None:
            ref = restrict_reference(ref, float(box.lo[0]), float(box.hi[0]))
        return rmse(model, ref)

    def metric_on_task(self, model, task_index):
        return self.metric(model, self.task_domains[task_index])
