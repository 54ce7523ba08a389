"""Loss assembly, collocation sampling, and Adam with exponential LR decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .nets import MlpParams, MultiFidelityModel, SfModel, l2_penalty_nonlinear


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the loss terms (0 disables a term)."""

    bc: float = 0.0
    ic: float = 0.0
    residual: float = 0.0
    data: float = 0.0
    nonlinear_l2: float = 0.0
    mas: float = 0.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")


@dataclass(frozen=True)
class LrSchedule:
    """lr(step) = init_rate * decay_rate ** (step / decay_steps), continuous."""

    init_rate: float
    decay_steps: int = 2000
    decay_rate: float = 1.0

    def __post_init__(self):
        if self.init_rate <= 0:
            raise ValueError("init_rate must be > 0")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")


def lr_at(schedule, step):
    if step < 0:
        raise ValueError("step must be >= 0")
    return schedule.init_rate * schedule.decay_rate ** (step / schedule.decay_steps)


class AdamState:
    """First/second moment vectors and step counter for a flat parameter vector."""

    __slots__ = ("m", "v", "step", "b1", "b2", "eps")

    def __init__(self, n_params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step = 0
        self.b1, self.b2, self.eps = b1, b2, eps


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update, in place on `params`."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params/grads/state dimensions disagree")
    if not np.all(np.isfinite(grads)):
        bad = int(np.sum(~np.isfinite(grads)))
        raise TrainingDiverged(
            f"non-finite gradients at adam step {state.step} ({bad} entries)")
    state.step += 1
    t = state.step
    state.m *= state.b1
    state.m += (1.0 - state.b1) * grads
    state.v *= state.b2
    state.v += (1.0 - state.b2) * grads * grads
    mhat = state.m / (1.0 - state.b1 ** t)
    vhat = state.v / (1.0 - state.b2 ** t)
    params -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# sampling domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by lo/hi corner vectors."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=np.float64)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=np.float64)))
        if self.lo.shape != self.hi.shape:
            raise ValueError("lo/hi shape mismatch")
        if np.any(self.hi < self.lo):
            raise ValueError(f"degenerate box: hi < lo ({self.lo} .. {self.hi})")

    @property
    def ndim(self):
        return self.lo.size

    @property
    def volume(self):
        return float(np.prod(self.hi - self.lo))

    def contains(self, pts, atol=0.0):
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo - atol) & (pts <= self.hi + atol), axis=1)


def sample_uniform(box, n, rng):
    """n i.i.d. uniform points in the box, deterministic per rng state."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return box.lo + rng.random((n, box.ndim)) * (box.hi - box.lo)


# ---------------------------------------------------------------------------
# batches and loss assembly
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """One iteration's training points; any subset may be empty (None)."""

    bc_points: Optional[np.ndarray] = None
    bc_targets: Optional[np.ndarray] = None
    ic_points: Optional[np.ndarray] = None
    ic_targets: Optional[np.ndarray] = None
    residual_points: Optional[np.ndarray] = None
    data_points: Optional[np.ndarray] = None
    data_targets: Optional[np.ndarray] = None
    # times for paired periodic-boundary evaluations (problem-specific bc_fn)
    bc_pair_times: Optional[np.ndarray] = None


def mse(preds, targets):
    """Mean over points of the squared Euclidean residual norm; empty -> 0."""
    n = preds.shape[0] if hasattr(preds, "shape") else np.asarray(preds).shape[0]
    if n != np.asarray(targets).shape[0]:
        raise ValueError("preds/targets point counts differ")
    if n == 0:
        return 0.0
    return ad.mean_sq(ad.sub(preds, targets))


def _mean_sq_terms(terms):
    """Mean squared norm for residual-style outputs: a matrix or list of columns."""
    if isinstance(terms, (list, tuple)):
        total = 0.0
        count = None
        for t in terms:
            tv = t.value if isinstance(t, ad.Var) else np.asarray(t)
            count = tv.shape[0]
            total = ad.add(total, ad.sum_all(ad.mul(t, t)))
        return ad.mul(total, 1.0 / count) if count else 0.0
    tv = terms.value if isinstance(terms, ad.Var) else np.asarray(terms)
    if tv.shape[0] == 0:
        return 0.0
    return ad.mean_sq(terms)


def assemble_loss(model, batch, weights, residual_fn=None, mas_term=None, bc_fn=None):
    """Weighted PINN/data loss.

    bc/ic/data terms are MSEs against targets; the residual term is the mean
    squared residual of `residual_fn(model, points)`. Multifidelity models add
    the nonlinear-subnet L2 penalty; `mas_term` (a callable of the model) adds
    the importance-weighted drift penalty. `bc_fn(model, times)` contributes
    paired-point mismatch terms (periodic boundaries) into the bc slot.
    """
    loss = 0.0
    w = weights
    if w.bc != 0.0:
        bc = 0.0
        if batch.bc_points is not None and len(batch.bc_points):
            bc = ad.add(bc, mse(model(batch.bc_points), batch.bc_targets))
        if batch.bc_pair_times is not None and len(batch.bc_pair_times):
            if bc_fn is None:
                raise ValueError("batch has bc pair times but no bc_fn was supplied")
            bc = ad.add(bc, _mean_sq_terms(bc_fn(model, batch.bc_pair_times)))
        loss = ad.add(loss, ad.mul(bc, w.bc))
    if w.ic != 0.0 and batch.ic_points is not None and len(batch.ic_points):
        loss = ad.add(loss, ad.mul(mse(model(batch.ic_points), batch.ic_targets), w.ic))
    if batch.residual_points is not None and len(batch.residual_points):
        if residual_fn is None:
            raise ValueError("batch has residual points but no residual_fn was supplied")
        if w.residual != 0.0:
            r = residual_fn(model, batch.residual_points)
            loss = ad.add(loss, ad.mul(_mean_sq_terms(r), w.residual))
    if w.data != 0.0 and batch.data_points is not None and len(batch.data_points):
        loss = ad.add(loss, ad.mul(mse(model(batch.data_points), batch.data_targets), w.data))
    if isinstance(model, MultiFidelityModel) and w.nonlinear_l2 != 0.0:
        loss = ad.add(loss, ad.mul(l2_penalty_nonlinear(model), w.nonlinear_l2))
    if mas_term is not None and w.mas != 0.0:
        loss = ad.add(loss, mas_term(model))
    return loss


# ---------------------------------------------------------------------------
# trainable wrappers: flat parameter buffer + per-step tape binding
# ---------------------------------------------------------------------------

class TrainableMlp:
    """Single dense net whose parameters live in one flat float64 buffer."""

    def __init__(self, spec, init_params):
        self.spec = spec
        self.theta = init_params.flatten() if isinstance(init_params, MlpParams) \
            else np.array(init_params, dtype=np.float64)
        self._views = MlpParams.from_flat(spec, self.theta)

    @property
    def n_params(self):
        return self.theta.size

    def bind(self, tape):
        """Model whose parameters are leaf Vars over the current buffer."""
        layers = [(tape.leaf(W), tape.leaf(b)) for W, b in self._views.layers]
        bound = MlpParams(self.spec, layers)
        return SfModel(bound), [bound.layers]

    def snapshot(self):
        return MlpParams.from_flat(self.spec, self.theta.copy())

    def freeze(self):
        return SfModel(self.snapshot())


class TrainableMf:
    """Multifidelity trainable: flat buffer = linear params, then nonlinear."""

    def __init__(self, prev, linear_init, nonlinear_init):
        self.prev = prev
        self.linear_spec = linear_init.spec
        self.nonlinear_spec = nonlinear_init.spec
        self.theta = np.concatenate([linear_init.flatten(), nonlinear_init.flatten()])
        n_lin = self.linear_spec.n_params
        self._lin_views = MlpParams.from_flat(self.linear_spec, self.theta[:n_lin])
        self._nl_views = MlpParams.from_flat(self.nonlinear_spec, self.theta[n_lin:])

    @property
    def n_params(self):
        return self.theta.size

    def bind(self, tape):
        lin = MlpParams(self.linear_spec,
                        [(tape.leaf(W), tape.leaf(b)) for W, b in self._lin_views.layers])
        nl = MlpParams(self.nonlinear_spec,
                       [(tape.leaf(W), tape.leaf(b)) for W, b in self._nl_views.layers])
        return MultiFidelityModel(self.prev, lin, nl), [lin.layers, nl.layers]

    def snapshot(self):
        n_lin = self.linear_spec.n_params
        return (MlpParams.from_flat(self.linear_spec, self.theta[:n_lin].copy()),
                MlpParams.from_flat(self.nonlinear_spec, self.theta[n_lin:].copy()))

    def freeze(self):
        lin, nl = self.snapshot()
        return MultiFidelityModel(self.prev, lin, nl)


def run_training(trainable, n_steps, schedule, make_batch, weights,
                 residual_fn=None, bc_fn=None, mas_term=None,
                 log_every=250, progress=None):
    """Adam loop over fresh batches; returns [(step, loss), ...].

    History entry 0 is the loss at the initial parameters, before any update.
    """
    adam = AdamState(trainable.n_params)
    history = []
    for step in range(n_steps):
        batch = make_batch(step)
        tape = ad.Tape()
        model, param_groups = trainable.bind(tape)
        loss = assemble_loss(model, batch, weights,
                             residual_fn=residual_fn, mas_term=mas_term, bc_fn=bc_fn)
        if not isinstance(loss, ad.Var):
            raise ValueError("loss has no trainable dependence (all terms empty?)")
        lv = float(loss.value)
        if step % log_every == 0 or step == n_steps - 1:
            history.append((step, lv))
            if progress is not None:
                progress(step, lv)
        if not np.isfinite(lv):
            raise TrainingDiverged(f"non-finite loss {lv} at step {step}")
        grads = ad.grad_params(loss, param_groups)
        adam_step(adam, trainable.theta, grads, lr_at(schedule, step))
    return history
