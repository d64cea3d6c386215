"""Sample-size sweep, torque-trace comparison and their CSV reports."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .deadzone import DeadZoneMask, MaskConfig, joint_sigma, mask, moving_stats, read_mask_csv, write_mask_csv
from .dynamics import parse_keyvalue
from .errors import InvalidInputError
from .mlp import MlpModel, TrainConfig, predict, train
from .ne import NeParams, ne_fit, ne_predict
from .signals import (Dataset, FilterConfig, Scaler, build_dataset, read_dataset_csv,
                      split_dataset, standardize, subsample_rows, write_dataset_csv)

log = logging.getLogger(__name__)

METHODS = ("ne", "conventional", "proposed")
# "ne_rigid" is the baseline without viscous terms, available on request
ALL_METHODS = METHODS + ("ne_rigid",)
DEFAULT_SIZES = tuple(range(300, 3001, 300))


@dataclass
class PreparedData:
    """Everything the evaluations need from one recording."""

    train: Dataset
    val: Dataset
    test: Dataset
    segment: Dataset
    sigma: np.ndarray
    alpha: float
    scaler: Scaler

    @property
    def train_mask(self) -> DeadZoneMask:
        return mask(self.train, self.sigma, self.alpha)

    @property
    def segment_mask(self) -> DeadZoneMask:
        return mask(self.segment, self.sigma, self.alpha)

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        out = [write_dataset_csv(getattr(self, name), d / f"{name}.csv")
               for name in ("train", "val", "test", "segment")]
        out.append(write_mask_csv(self.train_mask, d / "train_mask.csv"))
        out.append(write_mask_csv(self.segment_mask, d / "segment_mask.csv"))
        (d / "scaler.txt").write_text(self.scaler.dumps())
        lines = [f"alpha = {self.alpha!r}"] + [f"sigma{j} = {float(s)!r}" for j, s in enumerate(self.sigma)]
        (d / "deadzone.txt").write_text("\n".join(lines) + "\n")
        return out + [d / "scaler.txt", d / "deadzone.txt"]

    @classmethod
    def load(cls, directory) -> "PreparedData":
        d = Path(directory)
        missing = [n for n in ("train.csv", "val.csv", "test.csv", "segment.csv", "scaler.txt",
                               "deadzone.txt") if not (d / n).is_file()]
        if missing:
            raise InvalidInputError(f"{d}: missing prepared files {missing}")
        kv = parse_keyvalue((d / "deadzone.txt").read_text(), str(d / "deadzone.txt"))
        sigma = np.array([float(kv[f"sigma{j}"]) for j in range(3)])
        return cls(
            train=read_dataset_csv(d / "train.csv", "train"),
            val=read_dataset_csv(d / "val.csv", "val"),
            test=read_dataset_csv(d / "test.csv", "test"),
            segment=read_dataset_csv(d / "segment.csv", "segment"),
            sigma=sigma,
            alpha=float(kv["alpha"]),
            scaler=Scaler.loads((d / "scaler.txt").read_text()),
        )


def prepare(log_, alpha: float = 0.1, seed: int = 0, filters: FilterConfig | None = None) -> PreparedData:
    """Filter, mask and split a raw log.

    The velocity spread of each joint is taken over the whole recording
    after the filter warm-up and shared by every later mask.
    """
    MaskConfig(alpha)
    ds = build_dataset(log_, filters)
    sigma = joint_sigma(ds.drop_warmup())
    full_mask = mask(ds, sigma, alpha)
    split = split_dataset(ds, full_mask, seed)
    scaler, _ = standardize(split.train)
    return PreparedData(split.train, split.val, split.test, split.segment, sigma, alpha, scaler)


# ---------------------------------------------------------------------------
# Statistics


def ci95(values, use_t: bool = False) -> tuple[float, float]:
    """Mean and 95% half-width from the sample standard deviation.

    Normal multiplier 1.96 by default; ``use_t`` switches to Student's t.
    """
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan
    mean = float(v.mean())
    if len(v) < 2:
        return mean, math.nan
    se = float(v.std(ddof=1)) / math.sqrt(len(v))
    mult = float(stats.t.ppf(0.975, len(v) - 1)) if use_t else 1.96
    return mean, mult * se


def cell_seed(base: int, size: int, trial: int) -> int:
    """Independent, reproducible seed for one (size, trial) cell."""
    return int(np.random.SeedSequence((base, size, trial)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Sweep


@dataclass
class SweepConfig:
    sizes: tuple = DEFAULT_SIZES
    trials: int = 10
    base_seed: int = 0
    methods: tuple = METHODS
    jobs: int = 1
    use_t: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, pool_size: int | None = None) -> "SweepConfig":
        if self.trials < 2:
            raise InvalidInputError("need at least 2 trials per size for a confidence interval")
        if not self.sizes or min(self.sizes) < 1:
            raise InvalidInputError("sizes must be positive")
        if pool_size is not None and max(self.sizes) > pool_size:
            raise InvalidInputError(f"size {max(self.sizes)} exceeds the training pool of {pool_size}")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise InvalidInputError(f"unknown methods {sorted(unknown)}")
        if self.jobs < 1:
            raise InvalidInputError("jobs must be >= 1")
        return self


@dataclass
class SweepCell:
    method: str
    joint: int
    size: int
    values: list  # per trial; NaN marks an excluded (failed) trial

    @property
    def ok_values(self) -> np.ndarray:
        v = np.asarray(self.values, dtype=float)
        return v[np.isfinite(v)]


@dataclass
class SweepReport:
    cells: list
    trials: int
    use_t: bool = False
    failures: list = field(default_factory=list)  # (method, size, trial, message)

    def cell(self, method: str, joint: int, size: int) -> SweepCell:
        for c in self.cells:
            if (c.method, c.joint, c.size) == (method, joint, size):
                return c
        raise KeyError((method, joint, size))

    def stats(self, c: SweepCell) -> tuple[float, float]:
        return ci95(c.ok_values, self.use_t)

    def mean(self, method: str, joint: int, size: int) -> float:
        return self.stats(self.cell(method, joint, size))[0]

    @property
    def sizes(self) -> list:
        return sorted({c.size for c in self.cells})

    @property
    def methods(self) -> list:
        seen = []
        for c in self.cells:
            if c.method not in seen:
                seen.append(c.method)
        return seen


def _fit_method(method: str, sub: Dataset, r: np.ndarray, data: PreparedData, tcfg: TrainConfig):
    if method in ("ne", "ne_rigid"):
        return ne_fit(sub, r, viscous=(method == "ne"))
    return train(sub, data.val, r, replace(tcfg, mode=method), scaler=data.scaler)


def predict_any(model, ds: Dataset) -> np.ndarray:
    if isinstance(model, NeParams):
        return ne_predict(model, ds)
    if isinstance(model, MlpModel):
        return predict(model, ds)
    raise InvalidInputError(f"cannot predict with {type(model).__name__}")


def _run_cell(args):
    size, trial, cfg, data = args
    seed = cell_seed(cfg.base_seed, size, trial)
    rows = subsample_rows(len(data.train), size, seed)
    sub = data.train.take(rows)
    r = data.train_mask.r[rows]
    tcfg = replace(cfg.train, seed=seed)
    out = {}
    for method in cfg.methods:
        try:
            model = _fit_method(method, sub, r, data, tcfg)
            err = np.mean((predict_any(model, data.test) - data.test.tau) ** 2, axis=0)
            if not np.all(np.isfinite(err)):
                raise FloatingPointError("non-finite test error")
            out[method] = (err.tolist(), None)
        except Exception as exc:  # recorded per cell, never aborts the sweep
            out[method] = (None, f"{type(exc).__name__}: {exc}")
    return size, trial, out


def run_sweep(cfg: SweepConfig, data: PreparedData) -> SweepReport:
    """Train every method on random subsets of the training pool and test each.

    Cells are independent; with ``jobs > 1`` they run in worker processes and
    are merged in (size, trial) order, so the report does not depend on
    scheduling.
    """
    cfg.validate(len(data.train))
    tasks = [(size, trial, cfg, data) for size in cfg.sizes for trial in range(cfg.trials)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    results.sort(key=lambda x: (x[0], x[1]))

    values = {(m, j, s): [math.nan] * cfg.trials
              for m in cfg.methods for j in range(3) for s in cfg.sizes}
    failures = []
    for size, trial, out in results:
        for method, (err, msg) in out.items():
            if msg is not None:
                warnings.warn(f"{method} size {size} trial {trial} failed: {msg}")
                failures.append((method, size, trial, msg))
                continue
            for j in range(3):
                values[(method, j, size)][trial] = err[j]
    cells = [SweepCell(m, j, s, values[(m, j, s)])
             for m in cfg.methods for j in range(3) for s in cfg.sizes]
    return SweepReport(cells, cfg.trials, cfg.use_t, failures)


# ---------------------------------------------------------------------------
# Trace


@dataclass
class TraceReport:
    t: np.ndarray
    tau: np.ndarray
    predictions: dict  # method -> (rows, 3)
    flags: np.ndarray  # 1 where the joint is in a dead zone

    def __len__(self) -> int:
        return len(self.t)

    def flagged_deviation(self, method: str, reference: str = "ne") -> float:
        """Mean |method - reference| over all flagged (row, joint) entries."""
        sel = self.flags.astype(bool)
        if not sel.any():
            return math.nan
        return float(np.abs(self.predictions[method] - self.predictions[reference])[sel].mean())


def run_trace(models: dict, segment: Dataset, sigma, cfg: MaskConfig | float = MaskConfig()) -> TraceReport:
    """Predict the reserved segment with every model and flag dead-zone entries."""
    missing = [m for m in METHODS if m not in models or models[m] is None]
    if missing:
        raise InvalidInputError(f"trace needs trained models for {missing}")
    preds = {m: predict_any(models[m], segment) for m in METHODS}
    flags = 1 - mask(segment, sigma, cfg).r
    t = np.arange(len(segment)) / segment.rate
    return TraceReport(t, segment.tau.copy(), preds, flags.astype(np.int8))


def train_all(data: PreparedData, tcfg: TrainConfig | None = None) -> dict:
    """The three models trained on the full training pool."""
    tcfg = tcfg or TrainConfig()
    r = data.train_mask.r
    return {m: _fit_method(m, data.train, r, data, tcfg) for m in METHODS}


# ---------------------------------------------------------------------------
# Summary and files


def summary_stats(data: PreparedData) -> dict:
    """Dead-zone statistics of the training pool and how many rows each method can use."""
    m = data.train_mask
    per_joint, all_moving = moving_stats(m)
    n = len(m)
    out = {"alpha": data.alpha, "pool_size": n}
    for j in range(3):
        out[f"sigma{j}"] = float(data.sigma[j])
    for j in range(3):
        out[f"moving_fraction{j}"] = float(per_joint[j])
    out["all_moving_fraction"] = all_moving
    out["product_of_fractions"] = float(np.prod(per_joint))
    out["usable_rows_conventional"] = int(m.r.all(axis=1).sum())
    out["usable_fraction_conventional"] = all_moving
    out["usable_entries_proposed"] = int(m.r.sum())
    out["usable_fraction_proposed"] = float(m.r.mean())
    return out


def _f(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_sweep_csv(report: SweepReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "joint", "size", "mean_mse", "ci95"]
                   + [f"trial_{k}" for k in range(report.trials)])
        for c in report.cells:
            mean, half = report.stats(c)
            w.writerow([c.method, c.joint, c.size, _f(mean), _f(half)] + [_f(v) for v in c.values])
    return path


def read_sweep_csv(path, use_t: bool = False) -> SweepReport:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    trials = len(rows[0]) - 5
    cells = []
    for row in rows[1:]:
        vals = [float(v) if v else math.nan for v in row[5:]]
        cells.append(SweepCell(row[0], int(row[1]), int(row[2]), vals))
    return SweepReport(cells, trials, use_t)


def write_trace_csv(report: TraceReport, path) -> Path:
    path = Path(path)
    methods = list(report.predictions)
    header = ["t"]
    for j in range(3):
        header += [f"tau{j}"] + [f"{m}{j}" for m in methods] + [f"flag{j}"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(report)):
            row = [_f(report.t[i])]
            for j in range(3):
                row += [_f(report.tau[i, j])] + [_f(report.predictions[m][i, j]) for m in methods]
                row.append(int(report.flags[i, j]))
            w.writerow(row)
    return path


def read_trace_csv(path) -> TraceReport:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(header))
    col = {name: k for k, name in enumerate(header)}
    methods = [h[:-1] for h in header[2:] if h.endswith("0") and not h.startswith(("tau", "flag"))]
    tau = np.column_stack([data[:, col[f"tau{j}"]] for j in range(3)])
    preds = {m: np.column_stack([data[:, col[f"{m}{j}"]] for j in range(3)]) for m in methods}
    flags = np.column_stack([data[:, col[f"flag{j}"]] for j in range(3)]).astype(np.int8)
    return TraceReport(data[:, 0], tau, preds, flags)


def write_summary(summary: dict, path, failures: int | None = None) -> Path:
    path = Path(path)
    lines = []
    for k, v in summary.items():
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    if failures is not None:
        lines.append(f"failed_trials = {failures}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_summary(path) -> dict:
    kv = parse_keyvalue(Path(path).read_text(), str(path))
    out = {}
    for k, v in kv.items():
        try:
            out[k] = int(v)
        except ValueError:
            out[k] = float(v)
    return out


def write_reports(directory, sweep: SweepReport | None = None, trace: TraceReport | None = None,
                  summary: dict | None = None) -> list[Path]:
    """Write whichever of ``sweep.csv``, ``trace.csv`` and ``summary.txt`` are given."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        out = []
        if sweep is not None:
            out.append(write_sweep_csv(sweep, d / "sweep.csv"))
        if trace is not None:
            out.append(write_trace_csv(trace, d / "trace.csv"))
        if summary is not None:
            out.append(write_summary(summary, d / "summary.txt",
                                     None if sweep is None else len(sweep.failures)))
        return out
    except OSError as exc:
        raise OSError(f"cannot write reports to {d}: {exc}") from exc


def read_prepared_mask(directory) -> DeadZoneMask:
    return read_mask_csv(Path(directory) / "train_mask.csv")
