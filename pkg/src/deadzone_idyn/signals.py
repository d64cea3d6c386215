"""Filtering, downsampling and splitting of raw arm logs into 50 Hz samples."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import InsufficientDataError, InvalidInputError

log = logging.getLogger(__name__)

CHANNELS = ("q0", "q1", "q2", "dq0", "dq1", "dq2", "ddq0", "ddq1", "ddq2", "tau0", "tau1", "tau2")
INPUT_CHANNELS = CHANNELS[:9]


@dataclass(frozen=True)
class FilterConfig:
    """Filter settings; pass counts are applied on top of any differentiation."""

    cutoff: float = 25.0  # rad/s
    angle_passes: int = 2
    velocity_passes: int = 1
    torque_passes: int = 2
    decimation: int = 10  # 500 Hz -> 50 Hz
    warmup: float = 2.0  # seconds excluded from every split

    def validate(self) -> "FilterConfig":
        if not self.cutoff > 0:
            raise InvalidInputError("cutoff must be positive")
        if min(self.angle_passes, self.velocity_passes, self.torque_passes) < 0:
            raise InvalidInputError("filter pass counts must be non-negative")
        if self.decimation < 1:
            raise InvalidInputError("decimation must be >= 1")
        if self.warmup < 0:
            raise InvalidInputError("warmup must be non-negative")
        return self


@dataclass(frozen=True)
class Sample:
    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray
    tau: np.ndarray


@dataclass
class Dataset:
    """Column-stored samples.

    ``index`` holds each row's position in the full 50 Hz recording, which
    keeps subsets traceable back to the source and makes disjointness checks
    trivial.  ``warmup_rows`` counts leading rows still carrying the filter
    start-up transient.
    """

    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray
    tau: np.ndarray
    rate: float = 50.0
    tag: str = "raw"
    index: np.ndarray = field(default=None)
    warmup_rows: int = 0

    def __post_init__(self):
        n = len(self.q)
        for name in ("q", "dq", "ddq", "tau"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n, 3):
                raise InvalidInputError(f"{name} must have shape ({n}, 3), got {arr.shape}")
            setattr(self, name, arr)
        if self.index is None:
            self.index = np.arange(n)
        self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.q)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.q[i], self.dq[i], self.ddq[i], self.tau[i])

    @property
    def inputs(self) -> np.ndarray:
        """Network inputs (angle, velocity, acceleration), shape (N, 9)."""
        return np.hstack([self.q, self.dq, self.ddq])

    def as_array(self) -> np.ndarray:
        return np.hstack([self.q, self.dq, self.ddq, self.tau])

    def take(self, rows, tag: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.q[rows], self.dq[rows], self.ddq[rows], self.tau[rows],
                       rate=self.rate, tag=self.tag if tag is None else tag,
                       index=self.index[rows], warmup_rows=0)

    def drop_warmup(self) -> "Dataset":
        keep = np.arange(self.warmup_rows, len(self))
        return self.take(keep)


def _check_signal(signal, cutoff: float, dt: float) -> np.ndarray:
    x = np.asarray(signal, dtype=float)
    if x.shape[0] == 0:
        raise InvalidInputError("empty signal")
    if not (dt > 0 and cutoff > 0):
        raise InvalidInputError("dt and cutoff must be positive")
    if cutoff * dt >= 1:
        raise InvalidInputError(f"cutoff*dt = {cutoff * dt:g} is too coarse for the discretisation")
    return x


def lowpass(signal, cutoff: float, dt: float) -> np.ndarray:
    """Backward-Euler first-order low-pass along axis 0.

    y[k] = y[k-1] + g * (x[k] - y[k-1]) with g = dt*w / (1 + dt*w) and
    y[0] = x[0].
    """
    x = _check_signal(signal, cutoff, dt)
    gain = dt * cutoff / (1.0 + dt * cutoff)
    pole = 1.0 - gain
    # initial state chosen so that y[0] == x[0]
    zi = pole * x[:1]
    y, _ = lfilter([gain], [1.0, -pole], x, axis=0, zi=zi)
    return y


def pseudo_diff(signal, cutoff: float, dt: float) -> np.ndarray:
    """Band-limited derivative w * (x - lowpass(x)), i.e. s*w/(s + w)."""
    x = _check_signal(signal, cutoff, dt)
    return cutoff * (x - lowpass(x, cutoff, dt))


def _passes(x, n: int, cutoff: float, dt: float) -> np.ndarray:
    for _ in range(n):
        x = lowpass(x, cutoff, dt)
    return x


def build_dataset(log_, filters: FilterConfig | None = None, warn: bool = True) -> Dataset:
    """Turn a raw 500 Hz :class:`TrajectoryLog` into a 50 Hz :class:`Dataset`.

    Velocities come from one pseudo-differentiation plus ``velocity_passes``
    low-pass passes; accelerations differentiate the unfiltered velocity a
    second time.  Angles and torques get their own low-pass passes, so every
    channel carries the same number of filter poles.  A trailing remainder
    that does not fill a whole decimation block is dropped.
    """
    filters = (filters or FilterConfig()).validate()
    n = len(log_.t)
    if n < 2:
        raise InvalidInputError("log must contain at least two steps")
    dt = float(log_.t[1] - log_.t[0])
    w = filters.cutoff
    vel = pseudo_diff(log_.q, w, dt)
    dq = _passes(vel, filters.velocity_passes, w, dt)
    ddq = pseudo_diff(vel, w, dt)
    q = _passes(log_.q, filters.angle_passes, w, dt)
    tau = _passes(log_.tau, filters.torque_passes, w, dt)

    step = filters.decimation
    n_out = n // step
    if n % step and warn:
        warnings.warn(f"dropping {n % step} trailing steps that do not fill a {step}-step block")
    rows = np.arange(n_out) * step
    rate = 1.0 / (dt * step)
    warmup_rows = min(n_out, int(math.ceil(filters.warmup * rate - 1e-9)))
    return Dataset(q[rows], dq[rows], ddq[rows], tau[rows], rate=rate, tag="raw",
                   warmup_rows=warmup_rows)


@dataclass
class Split:
    train: Dataset
    val: Dataset
    test: Dataset
    segment: Dataset


def split_dataset(ds: Dataset, mask, seed: int, n_train: int = 6000, n_val: int = 500,
                  n_test: int = 500, segment_seconds: float = 3.0) -> Split:
    """Reserve a contiguous trace segment, then draw validation, test and training rows.

    Validation and test rows are drawn only from rows where every joint is
    moving; training rows are drawn from everything left over, dead zones
    included.  Rows inside the warm-up period never enter any set.
    """
    r = np.asarray(mask.r if hasattr(mask, "r") else mask)
    if r.shape != (len(ds), 3):
        raise InvalidInputError(f"mask shape {r.shape} does not match dataset of {len(ds)} rows")
    rng = np.random.default_rng(seed)
    seg_len = int(round(segment_seconds * ds.rate))
    first = ds.warmup_rows
    n = len(ds)
    needed = seg_len + n_train + n_val + n_test
    if n - first < needed:
        raise InsufficientDataError(
            f"dataset has {n - first} usable rows after warm-up, split needs {needed}")

    start = int(rng.integers(first, n - seg_len + 1))
    segment_rows = np.arange(start, start + seg_len)
    available = np.ones(n, dtype=bool)
    available[:first] = False
    available[segment_rows] = False

    full = r.all(axis=1)
    moving_pool = np.flatnonzero(available & full)
    if len(moving_pool) < n_val + n_test:
        raise InsufficientDataError(
            f"only {len(moving_pool)} fully-moving rows available, "
            f"validation and test need {n_val + n_test}")
    val_rows = rng.choice(moving_pool, n_val, replace=False)
    available[val_rows] = False
    test_rows = rng.choice(np.flatnonzero(available & full), n_test, replace=False)
    available[test_rows] = False

    rest = np.flatnonzero(available)
    if len(rest) < n_train:
        raise InsufficientDataError(f"only {len(rest)} rows left for training, need {n_train}")
    train_rows = rng.choice(rest, n_train, replace=False)
    return Split(
        train=ds.take(np.sort(train_rows), "train"),
        val=ds.take(np.sort(val_rows), "val"),
        test=ds.take(np.sort(test_rows), "test"),
        segment=ds.take(segment_rows, "segment"),
    )


def subsample(train: Dataset, k: int, seed) -> Dataset:
    """Uniform random subset of ``k`` rows without replacement."""
    if not 1 <= k <= len(train):
        raise InvalidInputError(f"subsample size {k} outside [1, {len(train)}]")
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(train), k, replace=False)
    return train.take(rows)


def subsample_rows(n: int, k: int, seed) -> np.ndarray:
    """Row indices :func:`subsample` would pick from a dataset of ``n`` rows."""
    if not 1 <= k <= n:
        raise InvalidInputError(f"subsample size {k} outside [1, {n}]")
    return np.random.default_rng(seed).choice(n, k, replace=False)


@dataclass
class Scaler:
    """Per-channel z-score for the 9 network inputs; targets are never scaled."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, x) -> np.ndarray:
        x = self._check(x)
        return (x - self.mean) / self.std

    def inverse(self, z) -> np.ndarray:
        z = self._check(z)
        return z * self.std + self.mean

    def _check(self, x) -> np.ndarray:
        if isinstance(x, Dataset):
            x = x.inputs
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(self.mean):
            raise InvalidInputError(
                f"scaler has {len(self.mean)} channels, input has {x.shape[-1]}")
        return x

    def dumps(self) -> str:
        lines = [f"channels = {len(self.mean)}"]
        for name, m, s in zip(INPUT_CHANNELS, self.mean, self.std):
            lines.append(f"mean_{name} = {float(m)!r}")
            lines.append(f"std_{name} = {float(s)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Scaler":
        from .dynamics import parse_keyvalue

        kv = parse_keyvalue(text, "<scaler>")
        try:
            mean = np.array([float(kv[f"mean_{c}"]) for c in INPUT_CHANNELS])
            std = np.array([float(kv[f"std_{c}"]) for c in INPUT_CHANNELS])
        except KeyError as exc:
            raise InvalidInputError(f"scaler file missing {exc.args[0]}") from exc
        return cls(mean, std)


def standardize(train: Dataset, *others: Dataset):
    """Fit a :class:`Scaler` on ``train`` and apply it to ``train`` and ``others``.

    Returns ``(scaler, [standardized inputs of train, *others])``.  A channel
    with zero variance gets scale 1 so it passes through centred but unscaled.
    """
    if len(train) == 0:
        raise InvalidInputError("cannot standardize an empty dataset")
    x = train.inputs
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = ~(std > 0)
    if flat.any():
        names = [INPUT_CHANNELS[i] for i in np.flatnonzero(flat)]
        warnings.warn(f"zero-variance input channels {names}; using scale 1")
        std = np.where(flat, 1.0, std)
    scaler = Scaler(mean, std)
    return scaler, [scaler.transform(d) for d in (train, *others)]


# ---------------------------------------------------------------------------
# CSV


def write_dataset_csv(ds: Dataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CHANNELS)
        for row in ds.as_array():
            w.writerow([repr(float(v)) for v in row])
    return path


def read_dataset_csv(path, tag: str = "raw", rate: float = 50.0) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = tuple(fh.readline().strip().split(","))
        if header != CHANNELS:
            raise InvalidInputError(f"{path}: unexpected dataset header")
        data = np.loadtxt(fh, delimiter=",", ndmin=2).reshape(-1, 12)
    return Dataset(data[:, 0:3], data[:, 3:6], data[:, 6:9], data[:, 9:12], rate=rate, tag=tag)
