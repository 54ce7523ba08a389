"""Config-driven experiment runner: builds problems and task sequences from a
validated config, trains them, grades every model on every task domain, and
writes a reproducible report directory.

Report layout (all deterministic except timing.json):
    report.json      metrics, config echo (byte-for-byte), fingerprints
    histories.json   per-network loss histories [(step, loss), ...]
    timing.json      wall clock (kept out of report.json so reports from equal
                     seeds are bit-identical)
    checkpoints/     one file per trained network + manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import time
from dataclasses import replace

import numpy as np

from . import __version__, rngs
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .continual import BatchSizes, TaskSpec, run_mfcl
from .nets import MlpSpec, init_mlp, load_model, save_model
from .perf import tune_allocator
from .problems import (AllenCahnProblem, AllenCahnSpec, PendulumProblem,
                       PendulumSpec, TabularProblem, load_tabular,
                       synth_seasonal)
from .train import (Batch, LossWeights, TrainableMlp, run_training)

_FINGERPRINT_MODULES = (
    # modules that define training semantics; config/cli/report plumbing is
    # deliberately excluded so that packaging changes do not invalidate runs
    "autodiff.py", "nets.py", "train.py", "continual.py", "rngs.py",
    "oracles.py", os.path.join("problems", "pendulum.py"),
    os.path.join("problems", "allen_cahn.py"),
    os.path.join("problems", "tabular.py"),
)


def code_fingerprint():
    """Hash of the numerical core; reports carry it so cached artifacts are
    only ever reused with the code that produced them."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for rel in _FINGERPRINT_MODULES:
        with open(os.path.join(root, rel), "rb") as fh:
            h.update(rel.encode())
            h.update(fh.read())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# building problems and task sequences from a config
# ---------------------------------------------------------------------------

def build_problem(config):
    pp = config.problem_params
    if config.problem == "pendulum":
        spec = PendulumSpec(
            n_tasks=pp.get("n_tasks", 5), t_end=pp.get("t_end", 10.0),
            mass=pp.get("mass", 1.0), length=pp.get("length", 1.0),
            damping=pp.get("damping", 0.05), gravity=pp.get("gravity", 9.81))
        return PendulumProblem(spec)
    if config.problem == "allen_cahn":
        spec = AllenCahnSpec(n_tasks=pp.get("n_tasks", 4),
                             diffusion=pp.get("diffusion", 1e-4))
        return AllenCahnProblem(spec)
    if config.problem == "tabular":
        source = pp.get("source", "synthetic")
        if source == "synthetic":
            dataset = synth_seasonal(
                seed=pp.get("synth_seed", rngs.derived_seed(config.seed, "dataset")),
                n_years=pp.get("synth_years_train", 3),
                test_years=pp.get("synth_years_test", 1),
                noise=pp.get("synth_noise", 1.0))
        elif source == "csv":
            dataset = load_tabular(
                pp["csv_path"], pp.get("task_rule", "single"),
                pp["target_column"], n_tasks=pp.get("n_tasks"),
                boundaries=pp.get("boundaries"),
                date_column=pp.get("date_column"),
                feature_columns=pp.get("feature_columns"),
                test_fraction=pp.get("test_fraction", 0.2),
                split_seed=pp.get("split_seed", 0))
        else:
            raise ConfigError([f"problem_params.source: unknown source {source!r}"])
        return TabularProblem(dataset)
    raise ConfigError([f"unknown problem {config.problem!r}"])


def _scaled(iters, scale):
    return max(1, int(round(iters * scale)))


def _sizes(batch):
    return BatchSizes(bc=batch.get("bc", 0), ic=batch.get("ic", 0),
                      residual=batch.get("residual", 0), data=batch.get("data", 0))


def build_tasks(config, problem):
    """TaskSpec list (+ bootstrap spec for mf mode) from a validated config."""
    weights = config.weights
    if config.strategy == "mas":
        weights = replace(weights, mas=config.lambda_mas or 0.0)
    replay = config.strategy == "replay"
    mas = config.strategy == "mas"

    tasks = []
    n = len(problem.task_domains)
    if config.mode == "sf":
        blk = config.sf
        spec = MlpSpec(blk.architecture, blk.activation)
        for i in range(n):
            tasks.append(TaskSpec(
                index=i, domain=problem.task_domains[i],
                iterations=_scaled(blk.iterations, config.scale),
                batch_sizes=_sizes(blk.batch), weights=weights, lr=blk.lr,
                replay=replay, mas=mas, mas_samples=config.mas_samples,
                sf_spec=spec))
        return tasks, None

    blk = config.mf
    nl_spec = MlpSpec(blk.nonlinear_architecture, blk.activation)
    lin_spec = MlpSpec(blk.linear_architecture, "linear")
    for i in range(n):
        iters = blk.iterations_first if i == 0 else blk.iterations
        tasks.append(TaskSpec(
            index=i, domain=problem.task_domains[i],
            iterations=_scaled(iters, config.scale),
            batch_sizes=_sizes(blk.batch), weights=weights, lr=blk.lr,
            replay=replay, mas=mas, mas_samples=config.mas_samples,
            nonlinear_spec=nl_spec, linear_spec=lin_spec))

    bb = config.bootstrap
    boot = TaskSpec(
        index=-1, domain=problem.task_domains[0],
        iterations=_scaled(bb.iterations, config.scale),
        batch_sizes=_sizes(bb.batch), weights=config.weights, lr=bb.lr,
        sf_spec=MlpSpec(bb.architecture, bb.activation))
    return tasks, boot


def _train_single_network(config, problem, verbose):
    """No-continual baseline: one net on the whole domain / pooled data."""
    blk = config.single
    spec = MlpSpec(blk.architecture, blk.activation)
    trainable = TrainableMlp(spec, init_mlp(
        spec, rngs.derived_seed(config.seed, "init-sf", 0)))
    sizes = _sizes(blk.batch)
    rng = rngs.stream(config.seed, "batch", 0)

    if isinstance(problem, TabularProblem):
        make = problem.all_data_batch_fn(sizes, rng)
        residual_fn = None
        bc_fn = None
    else:
        def make(step):
            return _sample_full_domain(problem, sizes, rng)

        residual_fn = problem.residual_fn
        bc_fn = problem.bc_fn

    iters = _scaled(blk.iterations, config.scale)
    history = run_training(
        trainable, iters, blk.lr, make, config.weights,
        residual_fn=residual_fn, bc_fn=bc_fn,
        log_every=max(1, iters // 200),
        progress=_printer("single", iters) if verbose else None)
    return trainable.freeze(), {"single": history}


def _sample_full_domain(problem, sizes, rng):
    """Batch over the union domain (same loss structure as per-task batches)."""
    from .train import sample_uniform
    full = problem.full_domain
    batch = problem.sample_batch(0, replace_sizes_zero_residual(sizes), rng)
    if sizes.residual > 0:
        batch.residual_points = sample_uniform(full, sizes.residual, rng)
    if batch.bc_pair_times is not None and len(batch.bc_pair_times):
        # periodic-BC times must span the whole time domain, not task 1's slice
        t_lo, t_hi = float(full.lo[-1]), float(full.hi[-1])
        batch.bc_pair_times = rng.uniform(t_lo, t_hi,
                                          size=batch.bc_pair_times.shape)
    return batch


def replace_sizes_zero_residual(sizes):
    return BatchSizes(bc=sizes.bc, ic=sizes.ic, residual=0, data=sizes.data)


def _printer(role, total):
    def cb(step, loss):
        print(f"    [{role}] step {step}/{total} loss {loss:.6g}", flush=True)
    return cb


# ---------------------------------------------------------------------------
# run + report
# ---------------------------------------------------------------------------

def run_experiment(config_or_path, seed=None, scale=None, out=None, verbose=True):
    """Execute one experiment and write its report directory.

    Returns the report dict (including "out_dir"). CLI overrides replace the
    config's seed/scale/out; the config echo stays byte-identical to the
    input.
    """
    tune_allocator()
    if isinstance(config_or_path, ExperimentConfig):
        config = config_or_path
    else:
        config = load_config(str(config_or_path))
    if seed is not None:
        config = replace(config, seed=int(seed))
    if scale is not None:
        if not 0 < float(scale) <= 1:
            raise ConfigError([f"scale override must be in (0, 1], got {scale}"])
        config = replace(config, scale=float(scale))
    if out is not None:
        config = replace(config, out=str(out))

    out_dir = config.out or f"runs/{config.problem}_{config.mode}_{config.strategy}"
    root = os.environ.get("MFCL_OUT_ROOT")
    if root and not os.path.isabs(out_dir):
        out_dir = os.path.join(root, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")

    start = time.time()
    problem = build_problem(config)
    if verbose:
        print(f"[mfcl] {config.problem} mode={config.mode} "
              f"strategy={config.strategy} seed={config.seed} "
              f"scale={config.scale} -> {out_dir}", flush=True)

    if config.single_network:
        model, histories = _train_single_network(config, problem, verbose)
        models = [model]
        os.makedirs(ckpt_dir, exist_ok=True)
        save_model(os.path.join(ckpt_dir, "single.ckpt"), model, seed=config.seed)
        checkpoints = {"single": "single.ckpt"}
    else:
        tasks, boot = build_tasks(config, problem)
        result = run_mfcl(
            tasks, problem, config.mode, config.seed, bootstrap=boot,
            checkpoint_dir=ckpt_dir,
            log_every=max(1, tasks[0].iterations // 100),
            progress=(lambda role, s, l:
                      print(f"    [{role}] step {s} loss {l:.6g}", flush=True))
            if verbose else None)
        models = result.models
        histories = result.histories
        checkpoints = result.checkpoints

    n_tasks = len(problem.task_domains)
    matrix = [[problem.metric_on_task(m, j) for j in range(n_tasks)]
              for m in models]
    final_rmse = problem.metric(models[-1])
    wall = time.time() - start

    report = {
        "mfcl_version": __version__,
        "code_fingerprint": code_fingerprint(),
        "problem": config.problem,
        "mode": config.mode,
        "strategy": config.strategy,
        "single_network": config.single_network,
        "seed": config.seed,
        "scale": config.scale,
        "lambda_mas": config.lambda_mas,
        "metric_name": problem.metric_name,
        "final_rmse": final_rmse,
        "rmse_matrix": matrix,
        "task_count": n_tasks,
        "checkpoints": checkpoints,
        "histories_file": "histories.json",
        "config_sha256": config.sha256(),
        "config_echo": config.raw_text,
    }
    _write_json(os.path.join(out_dir, "report.json"), report)
    _write_json(os.path.join(out_dir, "histories.json"),
                {k: [[int(s), float(l)] for s, l in v] for k, v in histories.items()})
    _write_json(os.path.join(out_dir, "timing.json"), {"wall_clock_s": wall})
    _write_json(os.path.join(ckpt_dir, "manifest.json"), {
        "seed": config.seed, "config_sha256": config.sha256(),
        "code_fingerprint": report["code_fingerprint"], "files": checkpoints})
    if verbose:
        print(f"[mfcl] done in {wall:.1f}s; final {problem.metric_name} "
              f"= {final_rmse:.6g}", flush=True)
    report["out_dir"] = out_dir
    return report


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _with_width(config, width):
    """Rewrite every hidden width of the sf/mf-nonlinear/single architectures."""
    def hid(arch):
        return (arch[0],) + (width,) * (len(arch) - 2) + (arch[-1],)

    sf = replace(config.sf, architecture=hid(config.sf.architecture)) \
        if config.sf else None
    single = replace(config.single, architecture=hid(config.single.architecture)) \
        if config.single else None
    mf = replace(config.mf,
                 nonlinear_architecture=hid(config.mf.nonlinear_architecture)) \
        if config.mf else None
    return replace(config, sf=sf, mf=mf, single=single)


def sweep_grid(config):
    """(label, derived-config) pairs for every sweep grid point."""
    lam_values = config.sweep.get("lambda_mas", [None])
    width_values = config.sweep.get("width", [None])
    points = []
    for lam, width in itertools.product(lam_values, width_values):
        cfg = config
        label = []
        if lam is not None:
            cfg = replace(cfg, lambda_mas=float(lam))
            label.append(f"lam_{lam:g}")
        if width is not None:
            cfg = _with_width(cfg, int(width))
            label.append(f"width_{width}")
        points.append(("_".join(label) or "point_0", cfg))
    return points


def run_sweep(config_or_path, seed=None, scale=None, out=None, verbose=True):
    """One run per sweep grid point; failures are recorded and skipped."""
    if isinstance(config_or_path, ExperimentConfig):
        config = config_or_path
    else:
        config = load_config(str(config_or_path))
    if not config.sweep:
        raise ConfigError(["sweep: config has no sweep lists"])
    if seed is not None:
        config = replace(config, seed=int(seed))
    if scale is not None:
        config = replace(config, scale=float(scale))
    out_dir = out or config.out or f"runs/{config.problem}_sweep"
    root = os.environ.get("MFCL_OUT_ROOT")
    if root and not os.path.isabs(out_dir):
        out_dir = os.path.join(root, out_dir)
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for label, cfg in sweep_grid(config):
        sub = os.path.join(out_dir, label)
        try:
            report = run_experiment(replace(cfg, sweep={}), out=sub,
                                    verbose=verbose)
            rows.append({"label": label, "lambda_mas": cfg.lambda_mas,
                         "width": _first_hidden(cfg),
                         "final_rmse": report["final_rmse"],
                         "status": "ok", "run_dir": sub})
        except Exception as e:  # a failed grid point must not kill the sweep
            rows.append({"label": label, "lambda_mas": cfg.lambda_mas,
                         "width": _first_hidden(cfg), "final_rmse": None,
                         "status": f"failed: {e}", "run_dir": sub})

    ok = [r for r in rows if r["status"] == "ok"]
    best = min(ok, key=lambda r: r["final_rmse"])["label"] if ok else None
    for r in rows:
        r["best"] = r["label"] == best
    summary = {"best": best, "rows": rows, "config_sha256": config.sha256(),
               "config_echo": config.raw_text}
    _write_json(os.path.join(out_dir, "sweep_summary.json"), summary)
    with open(os.path.join(out_dir, "sweep_summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["label", "lambda_mas", "width",
                                           "final_rmse", "status", "best",
                                           "run_dir"])
        w.writeheader()
        w.writerows(rows)
    summary["out_dir"] = out_dir
    return summary


def _first_hidden(config):
    blk = config.mf or config.sf or config.single
    arch = blk.nonlinear_architecture if hasattr(blk, "nonlinear_architecture") \
        else blk.architecture
    return arch[1] if len(arch) > 2 else None


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def emit_plot_data(report_dir, out_subdir="plots"):
    """Tidy CSVs of per-task predictions against the reference solution."""
    report_path = os.path.join(report_dir, "report.json")
    if not os.path.isfile(report_path):
        raise FileNotFoundError(f"no report.json in {report_dir}")
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    config = parse_config(report["config_echo"])
    config = replace(config, seed=report["seed"], scale=report["scale"])
    ckpt_dir = os.path.join(report_dir, "checkpoints")
    if not report["checkpoints"]:
        raise FileNotFoundError(f"report in {report_dir} lists no checkpoints")
    models = {}
    for role, fname in report["checkpoints"].items():
        path = os.path.join(ckpt_dir, fname)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"missing checkpoint {path}")
        models[role] = load_model(path)

    problem = build_problem(config)
    plot_dir = os.path.join(report_dir, out_subdir)
    os.makedirs(plot_dir, exist_ok=True)
    task_models = {role: m for role, m in models.items()
                   if role.split("_")[-1].isdigit() or role == "single"}

    written = []
    if config.problem == "pendulum":
        ref = problem.reference()
        t = ref.grids[0]
        for role, model in sorted(task_models.items()):
            preds = np.asarray(model(t[:, None]))
            path = os.path.join(plot_dir, f"curve_{role}.csv")
            _write_rows(path, ["task", "t", "output", "pred", "ref"],
                        ((role, f"{tv:.10g}", f"s{k + 1}",
                          f"{preds[i, k]:.10g}", f"{ref.values[i, k]:.10g}")
                         for i, tv in enumerate(t) for k in range(preds.shape[1])))
            written.append(path)
        ref_path = os.path.join(plot_dir, "reference.csv")
        _write_rows(ref_path, ["t", "s1", "s2"],
                    ((f"{tv:.10g}", f"{v[0]:.10g}", f"{v[1]:.10g}")
                     for tv, v in zip(t, ref.values)))
        written.append(ref_path)
    elif config.problem == "allen_cahn":
        ref = problem.reference()
        tg, xg = ref.grids
        for t_slice in (0.25, 0.75):
            it = int(np.argmin(np.abs(tg - t_slice)))
            pts = np.column_stack([xg, np.full_like(xg, tg[it])])
            for role, model in sorted(task_models.items()):
                preds = np.asarray(model(pts))
                path = os.path.join(plot_dir, f"slice_{role}_t{t_slice:g}.csv")
                _write_rows(path, ["task", "x", "pred", "ref"],
                            ((role, f"{x:.10g}", f"{preds[i, 0]:.10g}",
                              f"{ref.values[it, i]:.10g}")
                             for i, x in enumerate(xg)))
                written.append(path)
    elif config.problem == "tabular":
        ds = problem.dataset
        x = problem.stats.norm_features(ds.test_features)
        for role, model in sorted(task_models.items()):
            preds = problem.stats.denorm_targets(np.asarray(model(x)))
            path = os.path.join(plot_dir, f"test_{role}.csv")
            _write_rows(path, ["task", "index", "pred", "ref"],
                        ((role, i, f"{preds[i, 0]:.10g}",
                          f"{ds.test_targets[i, 0]:.10g}")
                         for i in range(len(preds))))
            written.append(path)
    return written


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# cached runs (long-budget training reuse, fingerprint-guarded)
# ---------------------------------------------------------------------------

def run_cached(config, cache_root, tag=None, verbose=True):
    """Run an experiment unless an identical one (same config bytes, seed,
    scale, and numerical-core fingerprint) already sits in the cache."""
    fp = code_fingerprint()
    key_src = f"{config.sha256()}|{config.seed}|{config.scale}|{fp}"
    key = hashlib.sha256(key_src.encode()).hexdigest()[:12]
    name = tag or f"{config.problem}_{config.mode}_{config.strategy}"
    run_dir = os.path.join(cache_root, f"{name}_{key}")
    report_path = os.path.join(run_dir, "report.json")
    if os.path.isfile(report_path):
        with open(report_path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
        if (report.get("code_fingerprint") == fp
                and report.get("config_sha256") == config.sha256()
                and report.get("seed") == config.seed
                and report.get("scale") == config.scale):
            report["out_dir"] = run_dir
            report["cached"] = True
            return report
    report = run_experiment(config, out=run_dir, verbose=verbose)
    report["cached"] = False
    return report
