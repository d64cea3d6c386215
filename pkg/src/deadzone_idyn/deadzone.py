"""Dead-zone reliability mask from joint velocities."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class MaskConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InvalidInputError("alpha must be non-negative")


@dataclass
class DeadZoneMask:
    """0/1 reliability per sample and joint plus the velocity spreads used."""

    sigma: np.ndarray
    r: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    def take(self, rows) -> "DeadZoneMask":
        return DeadZoneMask(self.sigma, self.r[np.asarray(rows)])

    @property
    def all_moving(self) -> np.ndarray:
        return self.r.all(axis=1)


def joint_sigma(ds) -> np.ndarray:
    """Population standard deviation of each joint's velocity."""
    dq = np.asarray(ds.dq if hasattr(ds, "dq") else ds, dtype=float)
    if len(dq) == 0:
        raise InvalidInputError("cannot take sigma of an empty dataset")
    return dq.std(axis=0)


def mask(ds, sigma, cfg: MaskConfig | float = MaskConfig()) -> DeadZoneMask:
    """r = 0 where |dq| <= alpha * sigma (boundary counts as dead), else 1."""
    alpha = cfg.alpha if isinstance(cfg, MaskConfig) else MaskConfig(float(cfg)).alpha
    dq = np.asarray(ds.dq if hasattr(ds, "dq") else ds, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (3,):
        raise InvalidInputError("sigma must have 3 entries")
    r = (np.abs(dq) > alpha * sigma).astype(np.int8)
    return DeadZoneMask(sigma.copy(), r)


def moving_stats(m: DeadZoneMask):
    """(per-joint moving fraction, fraction of rows with every joint moving)."""
    r = np.asarray(m.r if isinstance(m, DeadZoneMask) else m)
    if len(r) == 0:
        raise InvalidInputError("empty mask")
    return r.mean(axis=0), float(r.all(axis=1).mean())


def write_mask_csv(m: DeadZoneMask, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r0", "r1", "r2"])
        w.writerows(m.r.tolist())
    return path


def read_mask_csv(path, sigma=None) -> DeadZoneMask:
    path = Path(path)
    with path.open() as fh:
        if fh.readline().strip() != "r0,r1,r2":
            raise InvalidInputError(f"{path}: unexpected mask header")
        r = np.loadtxt(fh, delimiter=",", dtype=np.int8, ndmin=2).reshape(-1, 3)
    sigma = np.full(3, np.nan) if sigma is None else np.asarray(sigma, float)
    return DeadZoneMask(sigma, r)
