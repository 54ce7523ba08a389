"""Experiment configuration: YAML schema, strict validation, presets.

Unknown keys anywhere in a config are hard errors (a typo in a lambda name
must not silently run a different experiment). All validation problems are
collected and reported together.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import yaml

from .nets import ACTIVATIONS, MlpSpec
from .train import LossWeights, LrSchedule


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the full violation list."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


PROBLEMS = ("pendulum", "allen_cahn", "tabular")
MODES = ("sf", "mf")
STRATEGIES = ("none", "replay", "mas")


@dataclass
class NetBlock:
    """One network's training recipe (architecture row of the hyperparameter table)."""

    architecture: tuple
    activation: str
    lr: LrSchedule
    iterations: int
    batch: dict  # residual/bc/ic/data counts

    KEYS = {"architecture", "activation", "lr", "iterations", "batch"}


@dataclass
class MfBlock:
    nonlinear_architecture: tuple
    linear_architecture: tuple
    activation: str
    lr: LrSchedule
    iterations_first: int
    iterations: int
    batch: dict

    KEYS = {"nonlinear_architecture", "linear_architecture", "activation",
            "lr", "iterations_first", "iterations", "batch"}


@dataclass
class ExperimentConfig:
    problem: str
    mode: str
    strategy: str
    seed: int
    scale: float
    out: Optional[str]
    single_network: bool
    lambda_mas: Optional[float]
    mas_samples: int
    weights: LossWeights
    problem_params: dict
    sf: Optional[NetBlock]
    bootstrap: Optional[NetBlock]
    mf: Optional[MfBlock]
    single: Optional[NetBlock]
    sweep: dict
    raw_text: str = ""

    def sha256(self):
        return hashlib.sha256(self.raw_text.encode("utf-8")).hexdigest()


_TOP_KEYS = {"problem", "mode", "strategy", "seed", "scale", "out",
             "single_network", "lambda_mas", "mas_samples", "weights",
             "problem_params", "training", "sweep"}
_TRAIN_KEYS = {"sf", "bootstrap", "mf", "single"}
_WEIGHT_KEYS = {"bc", "ic", "residual", "data", "nonlinear_l2"}
_BATCH_KEYS = {"residual", "bc", "ic", "data"}
_SWEEP_KEYS = {"lambda_mas", "width"}
_PROBLEM_PARAM_KEYS = {
    "pendulum": {"n_tasks", "t_end", "mass", "length", "damping", "gravity"},
    "allen_cahn": {"n_tasks", "diffusion"},
    "tabular": {"source", "csv_path", "target_column", "date_column",
                "feature_columns", "task_rule", "boundaries", "n_tasks",
                "test_fraction", "split_seed", "synth_years_train",
                "synth_years_test", "synth_seed", "synth_noise"},
}


def _check_keys(d, allowed, where, problems):
    for k in d:
        if k not in allowed:
            problems.append(f"{where}: unknown key {k!r} (allowed: {sorted(allowed)})")


def _parse_lr(v, where, problems):
    if isinstance(v, (list, tuple)) and len(v) == 3:
        try:
            return LrSchedule(float(v[0]), int(v[1]), float(v[2]))
        except (TypeError, ValueError) as e:
            problems.append(f"{where}: bad lr triplet {v}: {e}")
            return None
    problems.append(f"{where}: lr must be a [rate, decay_steps, decay_rate] triplet")
    return None


def _parse_arch(v, where, problems):
    if (isinstance(v, (list, tuple)) and len(v) >= 2
            and all(isinstance(w, int) and w >= 1 for w in v)):
        return tuple(v)
    problems.append(f"{where}: architecture must be a list of >= 2 positive widths")
    return None


def _parse_batch(d, where, problems):
    if not isinstance(d, dict):
        problems.append(f"{where}: batch must be a mapping")
        return {}
    _check_keys(d, _BATCH_KEYS, where, problems)
    out = {k: 0 for k in _BATCH_KEYS}
    for k, v in d.items():
        if k in _BATCH_KEYS:
            if not isinstance(v, int) or v < 0:
                problems.append(f"{where}.{k}: must be a non-negative integer")
            else:
                out[k] = v
    return out


def _parse_net_block(d, where, problems):
    if not isinstance(d, dict):
        problems.append(f"{where}: must be a mapping")
        return None
    _check_keys(d, NetBlock.KEYS, where, problems)
    missing = NetBlock.KEYS - set(d)
    if missing:
        problems.append(f"{where}: missing keys {sorted(missing)}")
        return None
    arch = _parse_arch(d["architecture"], f"{where}.architecture", problems)
    lr = _parse_lr(d["lr"], f"{where}.lr", problems)
    batch = _parse_batch(d["batch"], f"{where}.batch", problems)
    if d["activation"] not in ACTIVATIONS:
        problems.append(f"{where}.activation: unknown activation {d['activation']!r}")
        return None
    if not isinstance(d["iterations"], int) or d["iterations"] < 1:
        problems.append(f"{where}.iterations: must be a positive integer")
        return None
    if arch is None or lr is None:
        return None
    return NetBlock(arch, d["activation"], lr, d["iterations"], batch)


def _parse_mf_block(d, where, problems):
    if not isinstance(d, dict):
        problems.append(f"{where}: must be a mapping")
        return None
    _check_keys(d, MfBlock.KEYS, where, problems)
    missing = MfBlock.KEYS - set(d)
    if missing:
        problems.append(f"{where}: missing keys {sorted(missing)}")
        return None
    nl = _parse_arch(d["nonlinear_architecture"], f"{where}.nonlinear_architecture",
                     problems)
    lin = _parse_arch(d["linear_architecture"], f"{where}.linear_architecture",
                      problems)
    lr = _parse_lr(d["lr"], f"{where}.lr", problems)
    batch = _parse_batch(d["batch"], f"{where}.batch", problems)
    ok = True
    if d["activation"] not in ACTIVATIONS:
        problems.append(f"{where}.activation: unknown activation {d['activation']!r}")
        ok = False
    for key in ("iterations_first", "iterations"):
        if not isinstance(d[key], int) or d[key] < 1:
            problems.append(f"{where}.{key}: must be a positive integer")
            ok = False
    if not ok or nl is None or lin is None or lr is None:
        return None
    return MfBlock(nl, lin, d["activation"], lr, d["iterations_first"],
                   d["iterations"], batch)


def parse_config(text):
    """Parse + validate YAML config text into an ExperimentConfig."""
    problems = []
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError([f"YAML parse error: {e}"])
    if not isinstance(data, dict):
        raise ConfigError(["config root must be a mapping"])

    _check_keys(data, _TOP_KEYS, "config", problems)

    problem = data.get("problem")
    if problem not in PROBLEMS:
        problems.append(f"problem: must be one of {PROBLEMS}, got {problem!r}")
    mode = data.get("mode", "sf")
    if mode not in MODES:
        problems.append(f"mode: must be one of {MODES}, got {mode!r}")
    strategy = data.get("strategy", "none")
    if strategy not in STRATEGIES:
        problems.append(f"strategy: must be one of {STRATEGIES}, got {strategy!r}")

    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        problems.append("seed: must be an integer")
        seed = 0
    scale = data.get("scale", 1.0)
    if not isinstance(scale, (int, float)) or not 0 < scale <= 1:
        problems.append(f"scale: must be in (0, 1], got {scale!r}")
        scale = 1.0

    single_network = bool(data.get("single_network", False))
    lambda_mas = data.get("lambda_mas")
    if lambda_mas is not None and (not isinstance(lambda_mas, (int, float))
                                   or lambda_mas < 0):
        problems.append(f"lambda_mas: must be a non-negative number, got {lambda_mas!r}")
        lambda_mas = None
    if strategy == "mas" and lambda_mas is None and not data.get("sweep", {}).get("lambda_mas"):
        problems.append("strategy 'mas' needs lambda_mas (or a lambda_mas sweep)")
    mas_samples = data.get("mas_samples", 0)
    if not isinstance(mas_samples, int) or mas_samples < 0:
        problems.append("mas_samples: must be a non-negative integer")
        mas_samples = 0
    if strategy == "mas" and mas_samples < 1:
        problems.append("strategy 'mas' needs mas_samples >= 1")

    wdata = data.get("weights", {})
    weights = LossWeights()
    if not isinstance(wdata, dict):
        problems.append("weights: must be a mapping")
    else:
        _check_keys(wdata, _WEIGHT_KEYS, "weights", problems)
        try:
            weights = LossWeights(
                bc=float(wdata.get("bc", 0.0)), ic=float(wdata.get("ic", 0.0)),
                residual=float(wdata.get("residual", 0.0)),
                data=float(wdata.get("data", 0.0)),
                nonlinear_l2=float(wdata.get("nonlinear_l2", 0.0)),
                mas=0.0)
        except (TypeError, ValueError) as e:
            problems.append(f"weights: {e}")

    pp = data.get("problem_params", {})
    if not isinstance(pp, dict):
        problems.append("problem_params: must be a mapping")
        pp = {}
    elif problem in _PROBLEM_PARAM_KEYS:
        _check_keys(pp, _PROBLEM_PARAM_KEYS[problem], "problem_params", problems)

    training = data.get("training", {})
    sf = boot = mf = single = None
    if not isinstance(training, dict):
        problems.append("training: must be a mapping")
    else:
        _check_keys(training, _TRAIN_KEYS, "training", problems)
        if "sf" in training:
            sf = _parse_net_block(training["sf"], "training.sf", problems)
        if "bootstrap" in training:
            boot = _parse_net_block(training["bootstrap"], "training.bootstrap",
                                    problems)
        if "mf" in training:
            mf = _parse_mf_block(training["mf"], "training.mf", problems)
        if "single" in training:
            single = _parse_net_block(training["single"], "training.single",
                                      problems)

    if single_network and single is None:
        problems.append("single_network runs need a training.single block")
    if not single_network:
        if mode == "sf" and sf is None:
            problems.append("sf mode needs a training.sf block")
        if mode == "mf" and (mf is None or boot is None):
            problems.append("mf mode needs training.mf and training.bootstrap blocks")

    sweep = data.get("sweep", {})
    if not isinstance(sweep, dict):
        problems.append("sweep: must be a mapping")
        sweep = {}
    else:
        _check_keys(sweep, _SWEEP_KEYS, "sweep", problems)
        for k, v in sweep.items():
            if not isinstance(v, list) or not v:
                problems.append(f"sweep.{k}: must be a non-empty list")

    out = data.get("out")
    if out is not None and not isinstance(out, str):
        problems.append("out: must be a string path")
        out = None

    if problems:
        raise ConfigError(problems)

    return ExperimentConfig(
        problem=problem, mode=mode, strategy=strategy, seed=seed,
        scale=float(scale), out=out, single_network=single_network,
        lambda_mas=None if lambda_mas is None else float(lambda_mas),
        mas_samples=mas_samples, weights=weights, problem_params=pp,
        sf=sf, bootstrap=boot, mf=mf, single=single, sweep=sweep,
        raw_text=text)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def preset_text(name):
    """Raw text of a shipped preset (name without the .yaml suffix)."""
    ref = resources.files("mfcl") / "presets" / f"{name}.yaml"
    if not ref.is_file():
        available = sorted(p.name[:-5] for p in (resources.files("mfcl") / "presets").iterdir()
                           if p.name.endswith(".yaml"))
        raise FileNotFoundError(f"no preset {name!r}; available: {available}")
    return ref.read_text(encoding="utf-8")


def load_preset(name):
    return parse_config(preset_text(name))
