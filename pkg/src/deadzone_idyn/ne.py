"""Rigid-body (Newton-Euler) baseline identified by recursive least squares."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Geometry, base_parameters, regressor_row
from .errors import InsufficientDataError, InvalidInputError

FORMAT_VERSION = 1


@dataclass
class NeParams:
    """Base-parameter estimate, its RLS covariance and the regressor setup it belongs to."""

    phi: np.ndarray
    cov: np.ndarray
    count: int = 0
    viscous: bool = True
    geometry: Geometry = field(default_factory=Geometry)

    @property
    def dim(self) -> int:
        return len(self.phi)

    def copy(self) -> "NeParams":
        return NeParams(self.phi.copy(), self.cov.copy(), self.count, self.viscous, self.geometry)


def rls_init(dim: int, prior_scale: float = 1e6, geometry: Geometry | None = None,
             viscous: bool = True) -> NeParams:
    if not prior_scale > 0:
        raise InvalidInputError("prior_scale must be positive")
    if dim < 1:
        raise InvalidInputError("dimension must be positive")
    return NeParams(np.zeros(dim), prior_scale * np.eye(dim), 0, viscous,
                    Geometry() if geometry is None else geometry)


def _update_inplace(phi, cov, Y, tau):
    # three scalar updates sharing one covariance, forgetting factor 1
    for y, t in zip(Y, tau):
        Py = cov @ y
        denom = 1.0 + y @ Py
        gain = Py / denom
        phi += gain * (t - y @ phi)
        cov -= np.outer(gain, Py)
    cov += cov.T
    cov *= 0.5


def rls_update(state: NeParams, Y, tau) -> NeParams:
    """Return the state after observing ``tau = Y @ phi`` for one sample."""
    Y = np.asarray(Y, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if Y.shape != (3, state.dim) or tau.shape != (3,):
        raise InvalidInputError(f"expected Y (3, {state.dim}) and tau (3,), got {Y.shape}, {tau.shape}")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(tau))):
        raise InvalidInputError("non-finite regressor or torque")
    out = state.copy()
    _update_inplace(out.phi, out.cov, Y, tau)
    out.count += 1
    return out


def ne_fit(train_ds, mask=None, viscous: bool = True, geometry: Geometry | None = None,
           prior_scale: float = 1e6) -> NeParams:
    """Fit the rigid-body parameters on the rows where every joint is moving.

    Rows are processed in dataset order.
    """
    base = base_parameters(geometry, viscous)
    if mask is None:
        rows = np.arange(len(train_ds))
    else:
        r = np.asarray(mask.r if hasattr(mask, "r") else mask)
        if r.shape != (len(train_ds), 3):
            raise InvalidInputError("mask does not match the training rows")
        rows = np.flatnonzero(r.all(axis=1))
    if len(rows) < base.size:
        raise InsufficientDataError(
            f"{len(rows)} fully-moving rows, need at least {base.size} to fit the baseline")
    Ys = regressor_row(train_ds.q[rows], train_ds.dq[rows], train_ds.ddq[rows],
                       base.geometry, viscous=viscous)
    taus = train_ds.tau[rows]
    state = rls_init(base.size, prior_scale, base.geometry, viscous)
    for Y, tau in zip(Ys, taus):
        _update_inplace(state.phi, state.cov, Y, tau)
    state.count = len(rows)
    return state


def ne_predict(params: NeParams, data) -> np.ndarray:
    """``regressor_row(q, dq, ddq) @ phi`` for one :class:`Sample` or a whole dataset."""
    Y = regressor_row(data.q, data.dq, data.ddq, params.geometry, viscous=params.viscous)
    if Y.shape[-1] != params.dim:
        raise InvalidInputError("regressor width does not match the fitted parameters")
    return Y @ params.phi


def save_ne(params: NeParams, path) -> Path:
    path = Path(path)
    g = params.geometry
    lines = [f"ne {FORMAT_VERSION} {params.dim}", " ".join(repr(float(v)) for v in params.phi)]
    lines += [" ".join(repr(float(v)) for v in row) for row in params.cov]
    lines += ["# metadata", f"count = {params.count}", f"viscous = {int(params.viscous)}",
              f"shoulder_height = {g.shoulder_height!r}", f"upper_length = {g.upper_length!r}",
              f"gravity = {g.gravity!r}",
              "names = " + " ".join(base_parameters(g, params.viscous).names)]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_ne(path) -> NeParams:
    from .dynamics import parse_keyvalue

    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "ne" or int(head[1]) != FORMAT_VERSION:
        raise InvalidInputError(f"{path}: not a baseline parameter file")
    dim = int(head[2])
    phi = np.array([float(v) for v in lines[1].split()])
    cov = np.array([[float(v) for v in lines[2 + i].split()] for i in range(dim)])
    if phi.shape != (dim,) or cov.shape != (dim, dim):
        raise InvalidInputError(f"{path}: array sizes do not match header")
    meta = parse_keyvalue("\n".join(lines[2 + dim:]), str(path))
    geom = Geometry(float(meta["shoulder_height"]), float(meta["upper_length"]),
                    float(meta["gravity"]))
    return NeParams(phi, cov, int(meta["count"]), bool(int(meta["viscous"])), geom)
