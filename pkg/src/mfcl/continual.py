"""The multifidelity continual-learning loop, MAS importances, replay.

Sequence structure for multifidelity mode: a single-fidelity bootstrap net is
trained on the first subdomain, a multifidelity net corrects it on that same
subdomain, and every later subdomain corrects the previous multifidelity net.
Single-fidelity mode trains one plain net per subdomain. Nets after the first
task start from the previous task's final parameters.

Random streams (root seed -> rngs.stream): "init-sf" / "init-linear" /
"init-nonlinear" (per net), "batch" (per task, also used by the bootstrap with
index -1), "replay" (per task), "mas" (per task).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import rngs
from .nets import (MlpParams, MlpSpec, MultiFidelityModel, SfModel,
                   activation_value_and_grad, init_mlp, save_model)
from .train import (Batch, Box, LossWeights, LrSchedule, TrainableMf,
                    TrainableMlp, run_training)


@dataclass(frozen=True)
class BatchSizes:
    bc: int = 0
    ic: int = 0
    residual: int = 0
    data: int = 0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"batch size {name} must be >= 0")


@dataclass
class TaskSpec:
    """One subdomain's training recipe."""

    index: int
    domain: Box
    iterations: int
    batch_sizes: BatchSizes
    weights: LossWeights
    lr: LrSchedule
    replay: bool = False
    mas: bool = False
    mas_samples: int = 0
    sf_spec: Optional[MlpSpec] = None
    nonlinear_spec: Optional[MlpSpec] = None
    linear_spec: Optional[MlpSpec] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mas and self.mas_samples < 1:
            raise ValueError("mas requires mas_samples >= 1")


@dataclass
class ImportanceWeights:
    """Per-parameter MAS weights, one structured set per subnet.

    subnets is a tuple of per-layer (W_importance, b_importance) lists:
    length 1 for single-fidelity nets, (linear, nonlinear) for multifidelity.
    """

    subnets: tuple

    def __post_init__(self):
        for net in self.subnets:
            for W, b in net:
                if np.any(W < 0) or np.any(b < 0):
                    raise ValueError("importance weights must be non-negative")


@dataclass
class TaskSequenceResult:
    models: list
    histories: dict
    bootstrap_model: Optional[object] = None
    checkpoints: dict = field(default_factory=dict)
    final_metric: Optional[float] = None
    metric_name: Optional[str] = None


# ---------------------------------------------------------------------------
# MAS
# ---------------------------------------------------------------------------

def _mlp_importance(params, X):
    """Mean absolute per-sample gradient of ||net(x)||^2 w.r.t. each parameter.

    Per-sample weight gradients are outer products, so the mean of their
    absolute values is |activations|^T |deltas| / N, layer by layer.
    """
    n = X.shape[0]
    activation = params.spec.activation
    acts = [np.asarray(X, dtype=np.float64)]
    act_grads = []
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        z = acts[-1] @ W + b
        if i != last:
            a, da = activation_value_and_grad(activation, z)
            acts.append(a)
            act_grads.append(da)
        else:
            acts.append(z)
    delta = 2.0 * acts[-1]
    imps = [None] * len(params.layers)
    for i in range(last, -1, -1):
        a_in = acts[i]
        W, _ = params.layers[i]
        imps[i] = (np.abs(a_in).T @ np.abs(delta) / n,
                   np.mean(np.abs(delta), axis=0))
        if i > 0:
            delta = (delta @ W.T) * act_grads[i - 1]
    return imps


def compute_mas_importance(model, sample_points):
    """Importance weights from output sensitivity at the sample points.

    For multifidelity models the two subnets are treated separately: each
    subnet's squared output norm is differentiated w.r.t. its own parameters,
    with the subnet evaluated at its own inputs (previous-model outputs for
    the linear net, raw inputs + previous outputs for the nonlinear net).
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("need at least one MAS sample point")
    if isinstance(model, MultiFidelityModel):
        prev_out = np.asarray(model.prev(pts), dtype=np.float64)
        return ImportanceWeights((
            _mlp_importance(model.linear, prev_out),
            _mlp_importance(model.nonlinear, np.hstack([pts, prev_out])),
        ))
    return ImportanceWeights((_mlp_importance(model.params, pts),))


def model_param_list(model):
    """Subnet parameter structures in canonical order."""
    if isinstance(model, MultiFidelityModel):
        return [model.linear, model.nonlinear]
    return [model.params]


def mas_penalty(importance, params, prev_params, lambda_mas):
    """lambda_mas * sum over parameters of importance * (current - previous)^2.

    params/prev_params are lists of MlpParams (one per subnet, same order as
    the importance sets); entries may be tape Vars during training.
    """
    if len(importance.subnets) != len(params) or len(params) != len(prev_params):
        raise ValueError("subnet count mismatch in MAS penalty")
    total = 0.0
    for net_imp, net_p, net_prev in zip(importance.subnets, params, prev_params):
        if len(net_imp) != len(net_p.layers):
            raise ValueError("layer count mismatch in MAS penalty")
        for (Wi, bi), (W, b), (Wp, bp) in zip(net_imp, net_p.layers, net_prev.layers):
            for imp, cur, prev in ((Wi, W, Wp), (bi, b, bp)):
                cur_val = cur.value if isinstance(cur, ad.Var) else cur
                if np.shape(imp) != np.shape(cur_val) or np.shape(imp) != np.shape(prev):
                    raise ValueError("parameter shape mismatch in MAS penalty")
                d = ad.sub(cur, prev)
                total = ad.add(total, ad.sum_all(ad.mul(imp, ad.mul(d, d))))
    return ad.mul(total, lambda_mas)


# ---------------------------------------------------------------------------
# replay and transfer
# ---------------------------------------------------------------------------

def sample_replay_points(previous_domains, n, rng):
    """n points uniform over the union of prior subdomains.

    Each point picks a subdomain with probability proportional to its volume,
    then samples uniformly inside it.
    """
    if not previous_domains:
        raise ValueError("replay needs at least one previously trained domain")
    if n < 1:
        raise ValueError("n must be >= 1")
    vols = np.array([b.volume for b in previous_domains])
    if vols.sum() <= 0:
        probs = np.full(len(previous_domains), 1.0 / len(previous_domains))
    else:
        probs = vols / vols.sum()
    idx = rng.choice(len(previous_domains), size=n, p=probs)
    los = np.stack([b.lo for b in previous_domains])[idx]
    his = np.stack([b.hi for b in previous_domains])[idx]
    return los + rng.random((n, los.shape[1])) * (his - los)


def transfer_init(prev_model, target_specs=None):
    """Bit-exact copies of a trained model's trainable parameters.

    Returns MlpParams for single-fidelity models and (linear, nonlinear) for
    multifidelity ones; raises if target_specs disagree with the source.
    """
    if isinstance(prev_model, MultiFidelityModel):
        specs = (prev_model.linear.spec, prev_model.nonlinear.spec)
        if target_specs is not None and tuple(target_specs) != specs:
            raise ValueError("architecture mismatch between consecutive tasks")
        return prev_model.linear.copy(), prev_model.nonlinear.copy()
    if target_specs is not None and target_specs != prev_model.spec:
        raise ValueError("architecture mismatch between consecutive tasks")
    return prev_model.params.copy()


# ---------------------------------------------------------------------------
# the sequential loop
# ---------------------------------------------------------------------------

def _validate_domains(tasks):
    for a, b in zip(tasks[:-1], tasks[1:]):
        da, db = a.domain, b.domain
        disjoint = np.any(da.hi <= db.lo + 1e-12) or np.any(db.hi <= da.lo + 1e-12)
        if not disjoint:
            raise ValueError(
                f"task domains {a.index} and {b.index} overlap beyond a boundary")


def _make_batch_fn(problem, task, i, seed, stream_index=None):
    stream_index = i if stream_index is None else stream_index
    rng_batch = rngs.stream(seed, "batch", stream_index)
    rng_replay = rngs.stream(seed, "replay", stream_index)
    use_replay = task.replay and i >= 1
    if use_replay and problem.residual_fn is None:
        raise ValueError("replay requires a residual-based problem")

    def make(step):
        batch = problem.sample_batch(i, task.batch_sizes, rng_batch)
        if use_replay and batch.residual_points is not None:
            extra = sample_replay_points(
                make.prior_domains, task.batch_sizes.residual, rng_replay)
            batch.residual_points = np.vstack([batch.residual_points, extra])
        return batch

    return make


def _mas_context(problem, tasks, i, prev_model, seed):
    task = tasks[i]
    importance = compute_mas_importance(
        prev_model,
        problem.mas_points(i - 1, task.mas_samples, rngs.stream(seed, "mas", i)))
    prev_params = model_param_list(prev_model)

    def term(model):
        return mas_penalty(importance, model_param_list(model), prev_params,
                           task.weights.mas)

    return term


def run_mfcl(tasks, problem, mode, seed, bootstrap=None, checkpoint_dir=None,
             log_every=250, progress=None):
    """Train the task sequence; returns models, histories, and checkpoints.

    mode "mf" (multifidelity; needs a bootstrap TaskSpec for the first
    single-fidelity net) or "sf" (one plain net per task).
    """
    mode = {"single_fidelity": "sf", "multifidelity": "mf"}.get(mode, mode)
    if mode not in ("sf", "mf"):
        raise ValueError(f"mode must be 'sf' or 'mf', got {mode!r}")
    if not tasks:
        raise ValueError("need at least one task")
    if problem.residual_fn is not None:
        _validate_domains(tasks)

    histories = {}
    checkpoints = {}
    models = []
    boot_model = None

    def _note(role, step, loss):
        if progress is not None:
            progress(role, step, loss)

    def _residual_bound():
        if problem.residual_fn is None:
            return None
        return lambda model, pts: problem.residual_fn(model, pts)

    def _save(role, model, prev_file=None):
        if checkpoint_dir is None:
            return
        os.makedirs(checkpoint_dir, exist_ok=True)
        fname = f"{role}.ckpt"
        save_model(os.path.join(checkpoint_dir, fname), model, seed=seed,
                   prev_file=prev_file)
        checkpoints[role] = fname

    if mode == "mf":
        if bootstrap is None:
            raise ValueError("multifidelity mode needs a bootstrap TaskSpec")
        trainable = TrainableMlp(
            bootstrap.sf_spec,
            init_mlp(bootstrap.sf_spec, rngs.derived_seed(seed, "init-sf", -1)))
        make = _make_batch_fn(problem, bootstrap, 0, seed, stream_index=-1)
        make.prior_domains = []
        histories["sf_bootstrap"] = run_training(
            trainable, bootstrap.iterations, bootstrap.lr, make, bootstrap.weights,
            residual_fn=_residual_bound(), bc_fn=problem.bc_fn,
            log_every=log_every,
            progress=lambda s, l: _note("sf_bootstrap", s, l))
        boot_model = trainable.freeze()
        _save("sf_bootstrap", boot_model)

    prev_model = boot_model
    for i, task in enumerate(tasks):
        role = f"{mode}_task_{i + 1}"
        if mode == "mf":
            if i == 0:
                lin = init_mlp(task.linear_spec,
                               rngs.derived_seed(seed, "init-linear", i))
                nl = init_mlp(task.nonlinear_spec,
                              rngs.derived_seed(seed, "init-nonlinear", i))
            else:
                lin, nl = transfer_init(
                    models[-1], (task.linear_spec, task.nonlinear_spec))
            trainable = TrainableMf(prev_model, lin, nl)
        else:
            if i == 0:
                params = init_mlp(task.sf_spec, rngs.derived_seed(seed, "init-sf", i))
            else:
                params = transfer_init(models[-1], task.sf_spec)
            trainable = TrainableMlp(task.sf_spec, params)

        mas_term = None
        if task.mas and i >= 1 and task.weights.mas > 0:
            mas_term = _mas_context(problem, tasks, i, models[-1], seed)

        make = _make_batch_fn(problem, task, i, seed)
        make.prior_domains = [t.domain for t in tasks[:i]]
        histories[role] = run_training(
            trainable, task.iterations, task.lr, make, task.weights,
            residual_fn=_residual_bound(), bc_fn=problem.bc_fn,
            mas_term=mas_term, log_every=log_every,
            progress=lambda s, l, r=role: _note(r, s, l))

        model = trainable.freeze()
        if mode == "mf":
            prev_file = "sf_bootstrap.ckpt" if i == 0 else f"mf_task_{i}.ckpt"
            _save(role, model, prev_file=prev_file)
            prev_model = model
        else:
            _save(role, model)
        models.append(model)

    final_metric = None
    metric_name = getattr(problem, "metric_name", None)
    if hasattr(problem, "metric"):
        final_metric = problem.metric(models[-1])

    return TaskSequenceResult(models=models, histories=histories,
                              bootstrap_model=boot_model,
                              checkpoints=checkpoints,
                              final_metric=final_metric,
                              metric_name=metric_name)
