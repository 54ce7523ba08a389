"""Generic tabular continual regression: CSV ingestion and a synthetic
seasonal energy-consumption generator.

Tasks partition the training rows either by target ranges (half-open
intervals, last one closed) or by calendar quarter of a date column. Features
and target are min-max normalized with statistics frozen from task 1; metrics
are reported in raw units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ..train import Batch, Box

FEATURE_NAMES = ("t_mean", "t_min", "t_max", "humidity", "daylight")

# documented generative model for the synthetic daily-consumption dataset;
# season = 2*pi*(day_of_year - 1)/365.25
SEASONAL = {
    "t_mean_base": 14.0, "t_mean_amp": 11.0, "t_mean_phase": 0.2,
    "t_spread": 3.5,
    "humidity_base": 62.0, "humidity_amp": 18.0, "humidity_phase": 1.3,
    "daylight_base": 12.0, "daylight_amp": 4.6, "daylight_phase": 0.15,
    "base_load": 22.0,
    "cooling_coeff": 1.15, "cooling_threshold": 19.0,
    "heating_coeff": 0.85, "heating_threshold": 10.0,
    "humidity_coeff": 0.05, "humidity_ref": 60.0,
    "daylight_coeff": 0.5, "daylight_ref": 14.0,
    "harmonic_amp": 1.8, "harmonic_phase": 0.7,
    "annual_amp": 1.5, "annual_phase": 0.8,
    "noise_sigma": 0.6,
}


def seasonal_consumption(t_mean, humidity, daylight, season):
    """Deterministic part of the synthetic daily consumption."""
    c = SEASONAL
    return (c["base_load"]
            + c["cooling_coeff"] * np.maximum(t_mean - c["cooling_threshold"], 0.0)
            + c["heating_coeff"] * np.maximum(c["heating_threshold"] - t_mean, 0.0)
            + c["humidity_coeff"] * (humidity - c["humidity_ref"])
            + c["daylight_coeff"] * (c["daylight_ref"] - daylight)
            + c["annual_amp"] * np.sin(season + c["annual_phase"])
            + c["harmonic_amp"] * np.sin(2.0 * season + c["harmonic_phase"]))


@dataclass
class TabularTaskSet:
    """Training rows with an ordered task partition plus a held-out test set."""

    features: np.ndarray
    targets: np.ndarray
    task_ids: np.ndarray
    test_features: np.ndarray
    test_targets: np.ndarray
    test_task_ids: np.ndarray
    n_tasks: int
    feature_names: tuple = FEATURE_NAMES
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.bincount(self.task_ids, minlength=self.n_tasks)
        if int(counts.sum()) != len(self.features):
            raise ValueError("task partition does not cover training rows exactly")
        empty = np.nonzero(counts == 0)[0]
        if empty.size:
            raise ValueError(f"empty task partitions: {empty.tolist()}")

    def task_rows(self, i):
        mask = self.task_ids == i
        return self.features[mask], self.targets[mask]


def _quarter_task_ids(dates):
    return (pd.DatetimeIndex(dates).quarter - 1).to_numpy()


def _target_range_task_ids(targets, boundaries):
    bounds = np.asarray(boundaries, dtype=np.float64)
    if bounds.ndim != 1 or bounds.size < 2 or np.any(np.diff(bounds) <= 0):
        raise ValueError("boundaries must be a strictly increasing list")
    t = np.asarray(targets, dtype=np.float64).ravel()
    if np.any(t < bounds[0]) or np.any(t > bounds[-1]):
        raise ValueError("targets fall outside the task boundaries")
    # half-open [b_i, b_{i+1}) with the last interval closed on the right
    ids = np.searchsorted(bounds, t, side="right") - 1
    return np.clip(ids, 0, bounds.size - 2)


def load_tabular(path, task_rule, target_column, n_tasks=None, boundaries=None,
                 date_column=None, feature_columns=None, test_fraction=0.2,
                 split_seed=0):
    """Read a numeric CSV and partition its rows into ordered tasks.

    task_rule: "target_range" (needs `boundaries`, half-open intervals) or
    "quarter" (needs `date_column` with ISO dates) or "single".
    """
    df = pd.read_csv(path)
    if target_column not in df.columns:
        raise ValueError(f"target column {target_column!r} not in CSV header")
    if feature_columns is None:
        feature_columns = [c for c in df.columns
                           if c not in (target_column, date_column)]
    for col in feature_columns + [target_column]:
        vals = pd.to_numeric(df[col], errors="coerce")
        if vals.isna().any():
            bad = int(vals.isna().sum())
            raise ValueError(f"column {col!r} has {bad} malformed rows")
        df[col] = vals

    features = df[feature_columns].to_numpy(dtype=np.float64)
    targets = df[[target_column]].to_numpy(dtype=np.float64)

    if task_rule == "target_range":
        if boundaries is None:
            raise ValueError("target_range rule needs boundaries")
        task_ids = _target_range_task_ids(targets, boundaries)
        n_tasks = n_tasks or len(boundaries) - 1
    elif task_rule == "quarter":
        if date_column is None:
            raise ValueError("quarter rule needs date_column")
        task_ids = _quarter_task_ids(df[date_column])
        n_tasks = n_tasks or 4
    elif task_rule == "single":
        task_ids = np.zeros(len(df), dtype=int)
        n_tasks = 1
    else:
        raise ValueError(f"unknown task rule {task_rule!r}")

    rng = np.random.default_rng(split_seed)
    n = len(df)
    test_mask = np.zeros(n, dtype=bool)
    n_test = int(round(test_fraction * n))
    if n_test:
        test_mask[rng.choice(n, size=n_test, replace=False)] = True

    return TabularTaskSet(
        features=features[~test_mask], targets=targets[~test_mask],
        task_ids=task_ids[~test_mask],
        test_features=features[test_mask], test_targets=targets[test_mask],
        test_task_ids=task_ids[test_mask],
        n_tasks=int(n_tasks), feature_names=tuple(feature_columns),
        meta={"source": str(path), "rule": task_rule})


def synth_seasonal(seed, n_years, test_years=1, noise=1.0, start="2015-01-01"):
    """Synthetic daily energy data: quarter tasks over n_years of training days
    plus test_years of held-out days. noise=0 makes the target exactly the
    documented formula of the generated features.
    """
    if n_years < 1:
        raise ValueError("n_years must be >= 1")
    rng = np.random.default_rng(seed)
    start_ts = pd.Timestamp(start)
    end_ts = start_ts + pd.DateOffset(years=n_years + test_years) - pd.Timedelta(days=1)
    dates = pd.date_range(start_ts, end_ts, freq="D")
    n = len(dates)
    season = 2.0 * np.pi * (dates.dayofyear.to_numpy() - 1) / 365.25

    c = SEASONAL
    t_mean = (c["t_mean_base"] - c["t_mean_amp"] * np.cos(season + c["t_mean_phase"])
              + noise * rng.normal(0.0, 1.8, n))
    spread_lo = c["t_spread"] + noise * np.abs(rng.normal(0.0, 1.0, n))
    spread_hi = c["t_spread"] + noise * np.abs(rng.normal(0.0, 1.0, n))
    t_min = t_mean - spread_lo
    t_max = t_mean + spread_hi
    humidity = np.clip(
        c["humidity_base"] + c["humidity_amp"] * np.sin(season + c["humidity_phase"])
        + noise * rng.normal(0.0, 4.0, n), 15.0, 100.0)
    daylight = (c["daylight_base"]
                - c["daylight_amp"] * np.cos(season + c["daylight_phase"])
                + noise * rng.normal(0.0, 0.15, n))
    target = (seasonal_consumption(t_mean, humidity, daylight, season)
              + noise * rng.normal(0.0, c["noise_sigma"], n))

    features = np.column_stack([t_mean, t_min, t_max, humidity, daylight])
    targets = target[:, None]
    task_ids = _quarter_task_ids(dates)
    train = dates < start_ts + pd.DateOffset(years=n_years)
    test = ~train

    return TabularTaskSet(
        features=features[train], targets=targets[train], task_ids=task_ids[train],
        test_features=features[test], test_targets=targets[test],
        test_task_ids=task_ids[test], n_tasks=4,
        meta={"source": "synth_seasonal", "seed": int(seed), "noise": noise,
              "dates_train": dates[train], "dates_test": dates[test],
              "season_train": season[train], "season_test": season[test]})


@dataclass(frozen=True)
class MinMaxStats:
    """Frozen task-1 normalization: x -> (x - lo) / (hi - lo)."""

    feat_lo: np.ndarray
    feat_hi: np.ndarray
    tgt_lo: float
    tgt_hi: float

    @classmethod
    def from_rows(cls, features, targets):
        lo = features.min(axis=0)
        hi = features.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return cls(lo, lo + span, float(targets.min()), float(max(targets.max(),
                                                                  targets.min() + 1e-12)))

    def norm_features(self, x):
        return (x - self.feat_lo) / (self.feat_hi - self.feat_lo)

    def norm_targets(self, y):
        return (y - self.tgt_lo) / (self.tgt_hi - self.tgt_lo)

    def denorm_targets(self, y):
        return y * (self.tgt_hi - self.tgt_lo) + self.tgt_lo


class TabularProblem:
    """Data-only continual regression over an ordered task partition."""

    metric_name = "test_rmse"
    residual_fn = None
    bc_fn = None

    def __init__(self, dataset):
        self.dataset = dataset
        f1, t1 = dataset.task_rows(0)
        self.stats = MinMaxStats.from_rows(f1, t1)
        self._train = [(self.stats.norm_features(f), self.stats.norm_targets(t))
                       for f, t in (dataset.task_rows(i)
                                    for i in range(dataset.n_tasks))]
        self.task_domains = [
            Box(f.min(axis=0), np.maximum(f.max(axis=0), f.min(axis=0) + 1e-9))
            for f, _ in self._train]
        lo = np.min([b.lo for b in self.task_domains], axis=0)
        hi = np.max([b.hi for b in self.task_domains], axis=0)
        self.full_domain = Box(lo, hi)

    @property
    def n_inputs(self):
        return self.dataset.features.shape[1]

    @property
    def n_outputs(self):
        return 1

    def sample_batch(self, task_index, sizes, rng):
        feats, tgts = self._train[task_index]
        idx = rng.integers(0, feats.shape[0], size=sizes.data)
        return Batch(data_points=feats[idx], data_targets=tgts[idx])

    def all_data_batch_fn(self, sizes, rng):
        """Batch sampler over the pooled training rows (no-CL baseline)."""
        feats = np.vstack([f for f, _ in self._train])
        tgts = np.vstack([t for _, t in self._train])

        def make(step):
            idx = rng.integers(0, feats.shape[0], size=sizes.data)
            return Batch(data_points=feats[idx], data_targets=tgts[idx])

        return make

    def mas_points(self, task_index, n, rng):
        feats, _ = self._train[task_index]
        idx = rng.integers(0, feats.shape[0], size=n)
        return feats[idx]

    def metric(self, model, box=None, task_index=None):
        """Test RMSE in raw target units, optionally on one task's test rows."""
        ds = self.dataset
        mask = (np.ones(len(ds.test_features), dtype=bool) if task_index is None
                else ds.test_task_ids == task_index)
        if not mask.any():
            return float("nan")
        x = self.stats.norm_features(ds.test_features[mask])
        pred = self.stats.denorm_targets(np.asarray(model(x)))
        err = pred - ds.test_targets[mask]
        return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))

    def metric_on_task(self, model, task_index):
        return self.metric(model, task_index=task_index)
