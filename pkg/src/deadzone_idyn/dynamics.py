"""Simulated 3-DOF arm with stick-slip joint friction.

Kinematic chain: joint 0 yaws about the vertical axis, joints 1 and 2 pitch
in the resulting vertical plane.  Links 1 and 2 are modelled as slender rods,
so each link's inertial behaviour is fully described by its mass ``m``, its
first moment ``m*c`` along the link and its second moment ``J`` about the
joint.  Rigid-body torques are therefore linear in the 12-vector

    [m0, m0*c0, J0, m1, m1*c1, J1, m2, m2*c2, J2, b0, b1, b2]

(the last three entries are viscous coefficients), which is what the
regressor and the least-squares baseline exploit.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericalError, SimulationDivergedError

log = logging.getLogger(__name__)

N_JOINTS = 3
N_FULL_PARAMS = 12
FULL_PARAM_NAMES = (
    "m0", "mc0", "J0", "m1", "mc1", "J1", "m2", "mc2", "J2", "b0", "b1", "b2",
)
MAX_SPEED = 50.0  # rad/s, divergence guard

_EZ = np.array([0.0, 0.0, 1.0])
_EX = np.array([1.0, 0.0, 0.0])
# Pitch joints rotate about -y so that a positive angle raises the link.
_AXES = (np.array([0.0, 0.0, 1.0]), np.array([0.0, -1.0, 0.0]), np.array([0.0, -1.0, 0.0]))


@dataclass(frozen=True)
class LinkParams:
    """Physical parameters of the arm.

    ``inertia`` is the rotational inertia of each link about its own joint
    axis.  Friction entries are per joint.
    """

    mass: tuple = (1.2, 0.8, 0.6)
    length: tuple = (0.12, 0.25, 0.25)
    com: tuple = (0.06, 0.12, 0.10)
    inertia: tuple = (0.004, 0.0167, 0.0125)
    viscous: tuple = (0.05, 0.04, 0.03)
    coulomb: tuple = (0.15, 0.20, 0.08)
    static: tuple = (0.60, 0.80, 0.30)
    stick_velocity: tuple = (0.01, 0.01, 0.01)
    gravity: float = 9.81

    def validate(self) -> "LinkParams":
        arrays = {f.name: np.asarray(getattr(self, f.name), dtype=float) for f in fields(self)}
        for name, arr in arrays.items():
            if name != "gravity" and arr.shape != (N_JOINTS,):
                raise InvalidInputError(f"{name} must have {N_JOINTS} entries, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} must be finite")
        for name in ("mass", "length", "inertia", "stick_velocity"):
            if np.any(arrays[name] <= 0):
                raise InvalidInputError(f"{name} must be strictly positive")
        if np.any(arrays["com"] <= 0) or np.any(arrays["com"] > arrays["length"]):
            raise InvalidInputError("com distance must lie in (0, link length]")
        if np.any(arrays["coulomb"] < 0) or np.any(arrays["static"] < arrays["coulomb"]):
            raise InvalidInputError("need static >= coulomb >= 0")
        if np.any(arrays["viscous"] < 0):
            raise InvalidInputError("viscous friction must be non-negative")
        if self.gravity < 0:
            raise InvalidInputError("gravity magnitude must be non-negative")
        return self

    @property
    def geometry(self) -> "Geometry":
        return Geometry(float(self.length[0]), float(self.length[1]), float(self.gravity))

    def inertial_vector(self) -> np.ndarray:
        """Full 12-entry parameter vector the rigid-body torque is linear in."""
        m = np.asarray(self.mass, float)
        c = np.asarray(self.com, float)
        J = np.asarray(self.inertia, float)
        per_link = np.stack([m, m * c, J], axis=1).ravel()
        return np.concatenate([per_link, np.asarray(self.viscous, float)])

    def without_friction(self) -> "LinkParams":
        return replace(self, coulomb=(0.0,) * 3, static=(0.0,) * 3, viscous=(0.0,) * 3)


@dataclass(frozen=True)
class Geometry:
    """The kinematic constants the rigid-body regressor depends on."""

    shoulder_height: float = 0.12
    upper_length: float = 0.25
    gravity: float = 9.81


@dataclass
class ArmState:
    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        self.q = _vec3(self.q, "q")
        self.dq = _vec3(self.dq, "dq")


@dataclass(frozen=True)
class ExcitationSpec:
    """Per-joint sum-of-sines reference with operator-style pauses.

    Each joint's sines run on their own clock, which stops during random
    holds (exponentially distributed, mean ``mean_hold`` seconds, covering
    ``hold_fraction`` of the time on average) and restarts through a
    raised-cosine ramp of ``ramp`` seconds.  Hold schedules are drawn
    independently per joint.  The default hold fractions come from
    :func:`calibrate_holds` on the default configuration and put each
    joint's moving fraction near 0.72 over the whole recording (about 0.70 in
    the training pool once fully-moving rows are set aside for evaluation).
    """

    n_sines: int = 5
    freq_range: tuple = (0.1, 1.5)  # Hz
    amp_range: tuple = (0.2, 0.6)  # rad
    offset: tuple = (0.0, 0.6, -1.0)  # rad, centre of each joint's motion
    hold_fraction: tuple = (0.306, 0.332, 0.304)
    mean_hold: float = 0.5  # s
    ramp: float = 0.3  # s


@dataclass(frozen=True)
class SimConfig:
    timestep: float = 0.002
    duration: float = 180.0
    seed: int = 0
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)
    kp: tuple = (40.0, 60.0, 20.0)
    kd: tuple = (2.0, 3.0, 0.8)
    gravity_compensation: bool = True

    def validate(self) -> "SimConfig":
        if not (self.timestep > 0 and math.isfinite(self.timestep)):
            raise InvalidInputError("timestep must be positive")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise InvalidInputError("duration must be positive")
        ex = self.excitation
        if ex.n_sines < 0:
            raise InvalidInputError("n_sines must be non-negative")
        lo, hi = ex.freq_range
        if not (0 < lo <= hi < 25.0):
            raise InvalidInputError("excitation frequencies must lie in (0, 25) Hz")
        if not (0 <= ex.amp_range[0] <= ex.amp_range[1]):
            raise InvalidInputError("amplitude range must be ordered and non-negative")
        hf = np.asarray(ex.hold_fraction, float)
        if hf.shape != (N_JOINTS,) or np.any(hf < 0) or np.any(hf >= 1):
            raise InvalidInputError("hold_fraction needs 3 entries in [0, 1)")
        if ex.mean_hold <= 0 or ex.ramp < 0:
            raise InvalidInputError("need mean_hold > 0 and ramp >= 0")
        for name in ("kp", "kd"):
            g = np.asarray(getattr(self, name), float)
            if g.shape != (N_JOINTS,) or np.any(g < 0):
                raise InvalidInputError(f"{name} must be 3 non-negative gains")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.timestep))


@dataclass
class TrajectoryLog:
    """Raw simulator output, one row per integration step."""

    t: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    tau: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def timestep(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else float("nan")


def _vec3(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1:] != (N_JOINTS,):
        raise InvalidInputError(f"{name} must have trailing dimension 3, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Newton-Euler recursion


def _rotations(q: np.ndarray) -> list[np.ndarray]:
    """Orientation of each link frame relative to its parent, shape (..., 3, 3)."""
    out = []
    for i, axis in enumerate(_AXES):
        c, s = np.cos(q[..., i]), np.sin(q[..., i])
        R = np.zeros(q.shape[:-1] + (3, 3))
        if i == 0:
            R[..., 0, 0], R[..., 0, 1] = c, -s
            R[..., 1, 0], R[..., 1, 1] = s, c
            R[..., 2, 2] = 1.0
        else:
            # rotation by q about -y
            R[..., 0, 0], R[..., 0, 2] = c, -s
            R[..., 1, 1] = 1.0
            R[..., 2, 0], R[..., 2, 2] = s, c
        out.append(R)
    return out


def _rt(R, v):
    return np.einsum("...ji,...j->...i", R, v)


def _r(R, v):
    return np.einsum("...ij,...j->...i", R, v)


def _rnea(q, dq, ddq, phi, geom: Geometry, gravity_scale=1.0, viscous=True):
    """Joint torques for the arm described by inertial vector(s) ``phi``.

    All arguments broadcast against each other along leading axes; ``phi``
    has trailing size 12.  ``gravity_scale`` multiplies the gravity magnitude
    (0 switches gravity off for a row).
    """
    q, dq, ddq = np.broadcast_arrays(q, dq, ddq)
    phi = np.asarray(phi, float)
    lead = np.broadcast_shapes(q.shape[:-1], phi.shape[:-1], np.shape(gravity_scale))
    q = np.broadcast_to(q, lead + (3,))
    dq = np.broadcast_to(dq, lead + (3,))
    ddq = np.broadcast_to(ddq, lead + (3,))
    phi = np.broadcast_to(phi, lead + (N_FULL_PARAMS,))
    gs = np.broadcast_to(np.asarray(gravity_scale, float), lead)

    offsets = (np.zeros(3), np.array([0.0, 0.0, geom.shoulder_height]),
               np.array([geom.upper_length, 0.0, 0.0]))
    Rs = _rotations(q)

    w = np.zeros(lead + (3,))
    wd = np.zeros(lead + (3,))
    # base acceleration of +g along z reproduces gravity on every link
    a = (geom.gravity * gs)[..., None] * _EZ
    forces, moments = [], []
    for i in range(N_JOINTS):
        R, p, z = Rs[i], offsets[i], _AXES[i]
        a_origin = a + np.cross(wd, p) + np.cross(w, np.cross(w, p))
        w_in = _rt(R, w)
        w = w_in + dq[..., i, None] * z
        wd = _rt(R, wd) + ddq[..., i, None] * z + np.cross(w_in, dq[..., i, None] * z)
        a = _rt(R, a_origin)

        m, h, J = phi[..., 3 * i], phi[..., 3 * i + 1], phi[..., 3 * i + 2]
        if i == 0:
            hvec = h[..., None] * _EZ
            Iw = J[..., None] * w
            Iwd = J[..., None] * wd
        else:
            hvec = h[..., None] * _EX
            # rod inertia J * (I - x x^T): no inertia about the link's own axis
            Iw = J[..., None] * (w - w[..., :1] * _EX)
            Iwd = J[..., None] * (wd - wd[..., :1] * _EX)
        f = m[..., None] * a + np.cross(wd, hvec) + np.cross(w, np.cross(w, hvec))
        n = Iwd + np.cross(w, Iw) + np.cross(hvec, a)
        forces.append(f)
        moments.append(n)

    tau = np.zeros(lead + (3,))
    f_child = np.zeros(lead + (3,))
    n_child = np.zeros(lead + (3,))
    for i in reversed(range(N_JOINTS)):
        if i + 1 < N_JOINTS:
            Rc = Rs[i + 1]
            f_c = _r(Rc, f_child)
            n_c = _r(Rc, n_child) + np.cross(offsets[i + 1], f_c)
        else:
            f_c = n_c = 0.0
        f_child = forces[i] + f_c
        n_child = moments[i] + n_c
        tau[..., i] = n_child @ _AXES[i]
    if viscous:
        tau = tau + phi[..., 9:12] * dq
    return tau


def mass_matrix(q, params: LinkParams) -> np.ndarray:
    """Joint-space inertia matrix M(q), shape (..., 3, 3)."""
    q = _vec3(q, "q")
    eye = np.eye(3)
    cols = _rnea(q[..., None, :], np.zeros(3), eye, params.inertial_vector(),
                 params.geometry, gravity_scale=0.0, viscous=False)
    return np.swapaxes(cols, -1, -2)


def ideal_inverse_dynamics(q, dq, ddq, params: LinkParams, viscous: bool = True) -> np.ndarray:
    """Friction-free torque M(q) ddq + C(q, dq) dq + g(q) (+ viscous term).

    Coulomb and static friction are never included.  Accepts single states or
    stacked arrays with trailing dimension 3.
    """
    q, dq, ddq = _vec3(q, "q"), _vec3(dq, "dq"), _vec3(ddq, "ddq")
    return _rnea(q, dq, ddq, params.inertial_vector(), params.geometry, viscous=viscous)


def _dynamics_terms(q, dq, params: LinkParams):
    """M(q), bias (Coriolis + gravity + viscous) and gravity torque in one batched pass."""
    qdd_rows = np.vstack([np.eye(3), np.zeros((2, 3))])
    dq_rows = np.vstack([np.zeros((3, 3)), dq, np.zeros(3)])
    gs = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
    out = _rnea(q, dq_rows, qdd_rows, params.inertial_vector(), params.geometry,
                gravity_scale=gs, viscous=True)
    return out[:3].T, out[3], out[4]


class _ClosedFormArm:
    """Lagrangian closed form of the same chain, in plain floats.

    Used by the integrator, where a batched recursion per step would dominate
    the run time.  Tests hold it equal to the Newton-Euler recursion.
    """

    def __init__(self, params: LinkParams):
        m, c, J = params.mass, params.com, params.inertia
        l1 = params.length[1]
        self.J0 = float(J[0])
        self.A1 = float(J[1] + m[2] * l1 * l1)
        self.J2 = float(J[2])
        self.K = float(m[2] * c[2] * l1)
        self.g1 = float(params.gravity * (m[1] * c[1] + m[2] * l1))
        self.g2 = float(params.gravity * m[2] * c[2])
        self.b = [float(v) for v in params.viscous]

    def terms(self, q, dq):
        q1, q2 = q[1], q[1] + q[2]
        c1, s1 = math.cos(q1), math.sin(q1)
        c12, s12 = math.cos(q2), math.sin(q2)
        cq2, sq2 = math.cos(q[2]), math.sin(q[2])
        A1, J2, K = self.A1, self.J2, self.K
        m00 = self.J0 + A1 * c1 * c1 + 2 * K * c1 * c12 + J2 * c12 * c12
        m11 = A1 + J2 + 2 * K * cq2
        m12 = J2 + K * cq2
        M = [[m00, 0.0, 0.0], [0.0, m11, m12], [0.0, m12, J2]]
        # partial derivatives of M00 with respect to q1 and q2
        d1 = -2 * A1 * c1 * s1 - 2 * K * (s1 * c12 + c1 * s12) - 2 * J2 * c12 * s12
        d2 = -2 * K * c1 * s12 - 2 * J2 * c12 * s12
        w0, w1, w2 = dq
        cor = [
            w0 * (d1 * w1 + d2 * w2),
            -K * sq2 * (2 * w1 * w2 + w2 * w2) - 0.5 * d1 * w0 * w0,
            K * sq2 * w1 * w1 - 0.5 * d2 * w0 * w0,
        ]
        grav = [0.0, self.g1 * c1 + self.g2 * c12, self.g2 * c12]
        bias = [cor[i] + grav[i] + self.b[i] * dq[i] for i in range(3)]
        return M, bias, grav


def _solve_subset(M, rhs, idx):
    """Solve M[idx, idx] x = rhs[idx] by Gaussian elimination on plain floats."""
    n = len(idx)
    A = [[M[i][j] for j in idx] + [rhs[i]] for i in idx]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(A[r][col]))
        if abs(A[piv][col]) < 1e-300:
            raise NumericalError("singular mass matrix")
        A[col], A[piv] = A[piv], A[col]
        for r in range(col + 1, n):
            f = A[r][col] / A[col][col]
            if f:
                for k in range(col, n + 1):
                    A[r][k] -= f * A[col][k]
    x = [0.0] * n
    for r in reversed(range(n)):
        acc = A[r][n] - sum(A[r][k] * x[k] for k in range(r + 1, n))
        x[r] = acc / A[r][r]
    return x


def _solve_stick_slip(M, net, dq, coulomb, static, v_stick):
    """Accelerations under stick-slip friction.

    ``net`` is applied torque minus Coriolis, gravity and viscous terms.
    Joints slower than their stick threshold are held (zero acceleration)
    while the torque needed to hold them stays within the static level; the
    joint that exceeds its static level by the largest margin is released
    first and then slides against Coulomb friction.

    Returns (ddq, stuck flags, holding torque of each joint, friction
    torque of each released joint) as lists.
    """
    slow = [abs(dq[j]) < v_stick[j] for j in range(3)]
    stuck = [slow[j] and static[j] > 0 for j in range(3)]
    fric = [0.0 if slow[j] else math.copysign(coulomb[j], dq[j]) for j in range(3)]
    while True:
        free = [j for j in range(3) if not stuck[j]]
        ddq = [0.0, 0.0, 0.0]
        if free:
            x = _solve_subset(M, [net[j] - fric[j] for j in range(3)], free)
            for j, v in zip(free, x):
                ddq[j] = v
        hold = [net[i] - sum(M[i][k] * ddq[k] for k in range(3)) for i in range(3)]
        worst, j_worst = 0.0, -1
        for j in range(3):
            if stuck[j] and abs(hold[j]) - static[j] > worst:
                worst, j_worst = abs(hold[j]) - static[j], j
        if j_worst < 0:
            return ddq, stuck, hold, fric
        stuck[j_worst] = False
        fric[j_worst] = math.copysign(coulomb[j_worst], hold[j_worst])


def _friction_lists(params: LinkParams):
    return ([float(v) for v in params.coulomb], [float(v) for v in params.static],
            [float(v) for v in params.stick_velocity])


def forward_dynamics(state: ArmState, torque, params: LinkParams) -> np.ndarray:
    """Joint accelerations for the applied ``torque`` including stick-slip friction."""
    torque = _vec3(torque, "torque")
    ddq, _, _ = forward_detail(state, torque, params)
    return ddq


def forward_detail(state: ArmState, torque, params: LinkParams):
    """Like :func:`forward_dynamics` but also returns the stuck flags and holding torques."""
    torque = _vec3(torque, "torque")
    params.validate()
    M, bias, _ = _dynamics_terms(state.q, state.dq, params)
    M = M.tolist()
    net = (torque - bias).tolist()
    ddq, stuck, hold, _ = _solve_stick_slip(M, net, state.dq.tolist(), *_friction_lists(params))
    return np.array(ddq), np.array(stuck), np.array(hold)


# ---------------------------------------------------------------------------
# Regressor and base parameters


def full_regressor(q, dq, ddq, geometry: Geometry, viscous: bool = True) -> np.ndarray:
    """Regressor against the full 12-entry inertial vector, shape (..., 3, 12).

    Column k is the torque produced by the k-th unit parameter vector.
    """
    q, dq, ddq = _vec3(q, "q"), _vec3(dq, "dq"), _vec3(ddq, "ddq")
    basis = np.eye(N_FULL_PARAMS)
    cols = _rnea(q[..., None, :], dq[..., None, :], ddq[..., None, :], basis, geometry,
                 viscous=viscous)
    return np.swapaxes(cols, -1, -2)


@dataclass(frozen=True)
class BaseParameters:
    """Identifiable parameter set of the chain for a fixed geometry.

    ``columns`` are the retained columns of the full regressor and
    ``projection`` maps a full inertial vector onto the base vector, so that
    ``full_regressor[..., columns] @ (projection @ phi) == full_regressor @ phi``.
    """

    geometry: Geometry
    viscous: bool
    columns: tuple
    projection: np.ndarray

    @property
    def names(self) -> list[str]:
        return [FULL_PARAM_NAMES[c] for c in self.columns]

    @property
    def size(self) -> int:
        return len(self.columns)

    def vector(self, params: LinkParams) -> np.ndarray:
        return self.projection @ params.inertial_vector()


_BASE_CACHE: dict = {}


def base_parameters(geometry: Geometry | None = None, viscous: bool = True) -> BaseParameters:
    """Zero-column elimination followed by dependent-column folding.

    Evaluates the full regressor on random states; identically-zero columns
    are dropped, then columns are scanned in order and kept only if they raise
    the rank.  Each dropped dependent column is rewritten as a combination of
    the kept ones.
    """
    geometry = Geometry() if geometry is None else geometry
    key = (geometry, viscous)
    if key in _BASE_CACHE:
        return _BASE_CACHE[key]
    rng = np.random.default_rng(12345)
    n = 64
    q = rng.uniform(-np.pi, np.pi, (n, 3))
    dq = rng.uniform(-3, 3, (n, 3))
    ddq = rng.uniform(-10, 10, (n, 3))
    Y = full_regressor(q, dq, ddq, geometry, viscous=viscous).reshape(-1, N_FULL_PARAMS)
    scale = np.abs(Y).max()
    tol = 1e-10 * scale * np.sqrt(Y.shape[0])

    kept: list[int] = []
    dependent: dict[int, np.ndarray] = {}
    for k in range(N_FULL_PARAMS):
        col = Y[:, k]
        if np.linalg.norm(col) <= tol:
            continue
        if kept:
            coef, *_ = np.linalg.lstsq(Y[:, kept], col, rcond=None)
            if np.linalg.norm(Y[:, kept] @ coef - col) <= tol:
                dependent[k] = (list(kept), coef)
                continue
        kept.append(k)

    proj = np.zeros((len(kept), N_FULL_PARAMS))
    for row, k in enumerate(kept):
        proj[row, k] = 1.0
    for k, (basis, coef) in dependent.items():
        for kk, cf in zip(basis, coef):
            proj[kept.index(kk), k] = cf
    proj[np.abs(proj) < 1e-12] = 0.0
    base = BaseParameters(geometry, viscous, tuple(kept), proj)
    _BASE_CACHE[key] = base
    return base


def regressor_row(q, dq, ddq, geometry: Geometry | None = None, viscous: bool = True) -> np.ndarray:
    """Base-parameter regressor Y with ``Y @ phi_base == ideal_inverse_dynamics``.

    Returns shape (3, P) for a single state, (N, 3, P) for stacked states.
    """
    base = base_parameters(geometry, viscous)
    Y = full_regressor(q, dq, ddq, base.geometry, viscous=viscous)
    return Y[..., list(base.columns)]


# ---------------------------------------------------------------------------
# Simulation


def _excitation(cfg: SimConfig, rng: np.random.Generator):
    ex = cfg.excitation
    shape = (N_JOINTS, ex.n_sines)
    freq = rng.uniform(*ex.freq_range, size=shape)
    amp = rng.uniform(*ex.amp_range, size=shape)
    phase = rng.uniform(0.0, 2 * np.pi, size=shape)
    return freq, amp, phase


def _clock_gate(ex: ExcitationSpec, fraction: float, t: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """Rate of one joint's reference clock on the grid ``t``: 1 moving, 0 holding."""
    hold = np.zeros(len(t))
    if fraction > 0 and len(t) > 1:
        mean_move = ex.mean_hold * (1 - fraction) / fraction
        dt = t[1] - t[0]
        now = t[0] + rng.exponential(mean_move)
        while now < t[-1]:
            length = rng.exponential(ex.mean_hold)
            hold[(t >= now) & (t < now + length)] = 1.0
            now += length + rng.exponential(mean_move)
        width = int(round(ex.ramp / dt))
        if width > 1:
            window = np.hanning(width + 2)[1:-1]
            window /= window.sum()
            hold = np.convolve(hold, window, mode="same")
    return np.clip(1.0 - hold, 0.0, 1.0)


def reference_trajectory(cfg: SimConfig, t: np.ndarray):
    """Per-joint reference angle and velocity, each shaped (len(t), 3)."""
    # separate streams so one joint's hold schedule never shifts another's
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(1 + N_JOINTS)]
    freq, amp, phase = _excitation(cfg, streams[0])
    t = np.asarray(t, dtype=float)
    gate = np.column_stack([_clock_gate(cfg.excitation, float(f), t, rng)
                            for f, rng in zip(cfg.excitation.hold_fraction, streams[1:])])
    # warped clock: integral of the gate, trapezoidal on the grid
    clock = np.zeros_like(gate)
    if len(t) > 1:
        clock[1:] = np.cumsum(0.5 * (gate[1:] + gate[:-1]) * np.diff(t)[:, None], axis=0)
    clock += t[0]
    arg = 2 * np.pi * freq[None] * clock[:, :, None] + phase[None]
    q_ref = np.asarray(cfg.excitation.offset, float) + (amp[None] * np.sin(arg)).sum(-1)
    dq_ref = gate * (amp[None] * 2 * np.pi * freq[None] * np.cos(arg)).sum(-1)
    return q_ref, dq_ref


def _held_accel(M, rhs, stuck):
    """Accelerations with the ``stuck`` joints held at rest."""
    free = [j for j in range(3) if not stuck[j]]
    ddq = [0.0, 0.0, 0.0]
    if free:
        for j, v in zip(free, _solve_subset(M, rhs, free)):
            ddq[j] = v
    return ddq


def simulate_trajectory(config: SimConfig, params: LinkParams) -> TrajectoryLog:
    """Track a random sum-of-sines reference with a PD controller.

    Each 2 ms step holds the controller torque and the stick-slip decision
    from the start of the step (a 500 Hz digital controller) and integrates
    the rigid-body part with a two-stage predictor-corrector: velocity first,
    then the stick clamp, then a trapezoidal position update.  A joint whose
    velocity changes sign in a step is also brought to rest, so every
    reversal passes through the stick test.
    """
    config.validate()
    params.validate()
    n = config.n_steps
    dt = config.timestep
    half = 0.5 * dt
    t = np.arange(n) * dt
    q_ref, dq_ref = reference_trajectory(config, t)
    kp = [float(v) for v in config.kp]
    kd = [float(v) for v in config.kd]
    arm = _ClosedFormArm(params)
    coulomb, static, v_stick = _friction_lists(params)
    q_ref_l, dq_ref_l = q_ref.tolist(), dq_ref.tolist()
    gcomp = config.gravity_compensation
    R = range(3)

    q = list(q_ref_l[0])
    dq = list(dq_ref_l[0])
    Q = np.empty((n, 3))
    DQ = np.empty((n, 3))
    TAU = np.empty((n, 3))
    for k in range(n):
        M, bias, grav = arm.terms(q, dq)
        qr, dqr = q_ref_l[k], dq_ref_l[k]
        tau = [kp[j] * (qr[j] - q[j]) + kd[j] * (dqr[j] - dq[j]) for j in R]
        if gcomp:
            tau = [tau[j] + grav[j] for j in R]
        Q[k], DQ[k], TAU[k] = q, dq, tau

        a1, stuck, _, fric = _solve_stick_slip(M, [tau[j] - bias[j] for j in R], dq,
                                               coulomb, static, v_stick)
        # predictor, then corrector with torque and friction held over the step
        dq_p = [0.0 if stuck[j] else dq[j] + dt * a1[j] for j in R]
        q_p = [q[j] + dt * dq_p[j] for j in R]
        M2, bias2, _ = arm.terms(q_p, dq_p)
        a2 = _held_accel(M2, [tau[j] - bias2[j] - fric[j] for j in R], stuck)
        dq_new = [dq[j] + half * (a1[j] + a2[j]) for j in R]
        for j in R:
            # a reversal under Coulomb friction passes through rest
            if stuck[j] or (coulomb[j] > 0 and dq[j] * dq_new[j] < 0):
                dq_new[j] = 0.0
        speed = max(abs(v) for v in dq_new)
        if not speed <= MAX_SPEED:
            raise SimulationDivergedError(k, float(speed))
        q = [q[j] + half * (dq[j] + dq_new[j]) for j in R]
        dq = dq_new
    return TrajectoryLog(t, Q, DQ, TAU)


def kinetic_energy(q, dq, params: LinkParams) -> np.ndarray:
    M = mass_matrix(q, params)
    dq = np.asarray(dq, float)
    return 0.5 * np.einsum("...i,...ij,...j->...", dq, M, dq)


# ---------------------------------------------------------------------------
# Friction calibration


def moving_fraction_of(log_: TrajectoryLog, alpha: float = 0.1) -> np.ndarray:
    """Per-joint share of 50 Hz samples flagged as moving after the standard pipeline."""
    from .deadzone import joint_sigma, mask, moving_stats
    from .signals import FilterConfig, build_dataset

    ds = build_dataset(log_, FilterConfig(), warn=False)
    ds = ds.drop_warmup()
    sigma = joint_sigma(ds)
    fractions, _ = moving_stats(mask(ds, sigma, alpha))
    return fractions


def calibrate_holds(config: SimConfig, params: LinkParams, target: tuple = (0.65, 0.75),
                    pilot_duration: float = 60.0, max_iter: int = 12) -> SimConfig:
    """Bisect each joint's hold fraction until its moving fraction lands in ``target``.

    All three joints are adjusted together on a shared pilot run.  Raises
    :class:`NumericalError` if some joint is still outside the band after
    ``max_iter`` rounds.
    """
    lo = np.zeros(N_JOINTS)
    hi = np.full(N_JOINTS, 0.9)
    current = np.asarray(config.excitation.hold_fraction, float).copy()
    mid_target = 0.5 * (target[0] + target[1])
    for it in range(max_iter):
        trial = replace(config, excitation=replace(
            config.excitation, hold_fraction=tuple(float(h) for h in current)))
        frac = moving_fraction_of(simulate_trajectory(replace(trial, duration=pilot_duration), params))
        log.info("calibration round %d: holds=%s moving=%s", it, current.round(4), frac.round(3))
        inside = (frac >= target[0]) & (frac <= target[1])
        if inside.all():
            return trial
        # longer holds -> lower moving fraction
        too_mobile = frac > mid_target
        lo = np.where(~inside & too_mobile, current, lo)
        hi = np.where(~inside & ~too_mobile, current, hi)
        current = np.where(inside, current, 0.5 * (lo + hi))
    raise NumericalError(f"hold calibration did not converge: moving={frac}")


# ---------------------------------------------------------------------------
# File formats


def _format(x: float) -> str:
    return repr(float(x))


def write_trajectory_csv(log_: TrajectoryLog, path) -> Path:
    path = Path(path)
    header = ["t", "q0", "q1", "q2", "dq0", "dq1", "dq2", "tau0", "tau1", "tau2"]
    data = np.column_stack([log_.t, log_.q, log_.dq, log_.tau])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([_format(v) for v in row])
    return path


def read_trajectory_csv(path) -> TrajectoryLog:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
        expected = ["t", "q0", "q1", "q2", "dq0", "dq1", "dq2", "tau0", "tau1", "tau2"]
        if header != expected:
            raise InvalidInputError(f"{path}: unexpected trajectory header {header}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return TrajectoryLog(data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 7:10])


def parse_keyvalue(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


_TRIPLE_KEYS = {"mass", "length", "com", "inertia", "viscous", "coulomb", "static",
                "stick_velocity", "kp", "kd", "offset", "freq_range", "amp_range",
                "hold_fraction"}


def _parse_value(key: str, value: str):
    try:
        if key in _TRIPLE_KEYS:
            return tuple(float(v) for v in value.replace(",", " ").split())
        if key in ("seed", "n_sines"):
            return int(value)
        if key == "gravity_compensation":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        return float(value)
    except ValueError as exc:
        raise InvalidInputError(f"bad value for {key}: {value!r}") from exc


def load_config(path=None, text: str | None = None) -> tuple[SimConfig, LinkParams]:
    """Read LinkParams and SimConfig overrides from a key=value file.

    Unknown keys are rejected.  Triple-valued keys take three numbers
    separated by spaces or commas.
    """
    if text is None:
        if path is None:
            return SimConfig(), LinkParams()
        path = Path(path)
        if not path.is_file():
            raise InvalidInputError(f"config file not found: {path}")
        text = path.read_text()
    values = parse_keyvalue(text, str(path) if path else "<config>")
    link_keys = {f.name for f in fields(LinkParams)}
    sim_keys = {f.name for f in fields(SimConfig)} - {"excitation"}
    ex_keys = {f.name for f in fields(ExcitationSpec)}
    link, sim, ex = {}, {}, {}
    for key, raw in values.items():
        value = _parse_value(key, raw)
        if key in link_keys:
            link[key] = value
        elif key in sim_keys:
            sim[key] = value
        elif key in ex_keys:
            ex[key] = value
        else:
            raise InvalidInputError(f"unknown config key {key!r}")
    cfg = SimConfig(**sim, excitation=ExcitationSpec(**ex))
    params = LinkParams(**link)
    return cfg.validate(), params.validate()


def dump_config(cfg: SimConfig, params: LinkParams) -> str:
    lines = ["# link parameters"]
    for f in fields(LinkParams):
        v = getattr(params, f.name)
        lines.append(f"{f.name} = {' '.join(_format(x) for x in v) if isinstance(v, tuple) else _format(v)}")
    lines.append("# simulation")
    for f in fields(SimConfig):
        if f.name == "excitation":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(_format(x) for x in v)
        lines.append(f"{f.name} = {v}")
    for f in fields(ExcitationSpec):
        v = getattr(cfg.excitation, f.name)
        if isinstance(v, tuple):
            v = " ".join(_format(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
