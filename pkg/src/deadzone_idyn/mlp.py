"""Feed-forward torque network, dead-zone masked loss and Adam training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, InvalidInputError
from .signals import Dataset, Scaler

log = logging.getLogger(__name__)

MODES = ("proposed", "conventional")
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "proposed"
    hidden: tuple = (64,)

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be positive")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be >= 1")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidInputError("invalid Adam constants")
        return self


@dataclass
class MlpModel:
    """Weights ``W[k]`` of shape (out, in) and biases ``b[k]`` per layer.

    Hidden layers use a rectifier, the output layer is linear.  ``scaler``
    is the input standardisation fitted on the training data, if any.
    """

    weights: list
    biases: list
    scaler: Scaler | None = None
    best_epoch: int = -1
    best_val_mse: float = math.inf
    seed: int = 0
    mode: str = "proposed"
    history: list = field(default_factory=list)

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                        self.scaler, self.best_epoch, self.best_val_mse, self.seed, self.mode,
                        list(self.history))


def init_model(sizes=(9, 64, 3), rng=None) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.sizes[0]:
        raise InvalidInputError(f"expected {model.sizes[0]} input features, got {x.shape[1]}")
    return x, single


def _activations(model: MlpModel, x: np.ndarray) -> list:
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(model: MlpModel, x) -> np.ndarray:
    """Predicted torque for standardized input(s) ``x``."""
    x, single = _as_batch(model, x)
    out = _activations(model, x)[-1]
    return out[0] if single else out


def _check_triplet(tau, tau_hat, r):
    tau = np.asarray(tau, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    r = np.asarray(r, dtype=float)
    if tau.shape != tau_hat.shape or tau.shape != r.shape or tau.ndim != 2:
        raise InvalidInputError(
            f"shape mismatch: tau {tau.shape}, prediction {tau_hat.shape}, mask {r.shape}")
    return tau, tau_hat, r


def masked_loss(tau, tau_hat, r) -> float:
    """Mean over the batch of the per-sample joint average of r * squared error.

    The normalisation is always 1 / (n * joints), however many entries are
    masked.
    """
    tau, tau_hat, r = _check_triplet(tau, tau_hat, r)
    n, joints = tau.shape
    return float(np.sum(r * (tau - tau_hat) ** 2) / (n * joints))


def backward(model: MlpModel, x, tau, r):
    """Masked loss and its gradient with respect to every weight and bias.

    The output error of each masked entry is zeroed before it is propagated,
    so masked joints contribute nothing to any gradient.  Returns
    ``(loss, grads)`` with ``grads`` ordered like ``model.params``.
    """
    x, _ = _as_batch(model, x)
    acts = _activations(model, x)
    tau, out, r = _check_triplet(tau, acts[-1], r)
    n, joints = tau.shape
    resid = r * (out - tau)
    loss = float(np.sum(resid * (out - tau)) / (n * joints))
    delta = (2.0 / (n * joints)) * resid

    grads = [None] * (2 * len(model.weights))
    for k in reversed(range(len(model.weights))):
        h_in = acts[k]
        grads[2 * k] = delta.T @ h_in
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k]) * (acts[k] > 0)
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


def mse(tau, tau_hat) -> float:
    tau = np.asarray(tau, float)
    return float(np.mean((tau - np.asarray(tau_hat, float)) ** 2))


def _mask_array(mask, n: int) -> np.ndarray:
    r = np.asarray(mask.r if hasattr(mask, "r") else mask)
    if r.shape != (n, 3):
        raise InvalidInputError(f"mask shape {r.shape} does not match {n} training rows")
    return r.astype(float)


def train(train_ds: Dataset, val_ds: Dataset, mask, cfg: TrainConfig | None = None,
          scaler: Scaler | None = None) -> MlpModel:
    """Train with shuffled mini-batches and keep the best-validation epoch.

    ``proposed`` keeps every row and weights each joint's error by ``mask``;
    ``conventional`` drops rows where any joint is in a dead zone and uses
    plain MSE.  Validation uses plain MSE on unscaled torque.  When no
    ``scaler`` is given one is fitted on the rows actually trained on.
    """
    cfg = (cfg or TrainConfig()).validate()
    r = _mask_array(mask, len(train_ds))
    if cfg.mode == "conventional":
        keep = np.flatnonzero(r.all(axis=1))
        if len(keep) == 0:
            raise InsufficientDataError("no training rows with every joint moving")
        log.debug("conventional: training on %d of %d rows (%.1f%%) with every joint moving",
                 len(keep), len(r), 100.0 * len(keep) / len(r))
        train_ds = train_ds.take(keep)
        r = np.ones((len(keep), 3))
    if scaler is None:
        from .signals import standardize

        scaler, _ = standardize(train_ds)
    x = scaler.transform(train_ds)
    y = train_ds.tau
    xv = scaler.transform(val_ds)
    yv = val_ds.tau
    n = len(x)
    log.debug("training %s on %d rows", cfg.mode, n)

    rng = np.random.default_rng(cfg.seed)
    model = init_model((x.shape[1],) + tuple(cfg.hidden) + (y.shape[1],), rng)
    model.scaler, model.seed, model.mode = scaler, cfg.seed, cfg.mode
    params = model.params
    state = AdamState.zeros_like(params)
    bs = min(cfg.batch_size, n)
    best = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            _, grads = backward(model, x[rows], y[rows], r[rows])
            adam_step(params, grads, state, cfg)
        val = mse(yv, forward(model, xv))
        model.history.append(val)
        if not math.isfinite(val):
            log.warning("non-finite validation MSE at epoch %d", epoch)
            continue
        if best is None or val < best.best_val_mse:
            best = model.copy()
            best.best_epoch, best.best_val_mse = epoch, val
    if best is None:
        raise InsufficientDataError("training never produced a finite validation MSE")
    best.history = list(model.history)
    return best


def predict(model: MlpModel, data) -> np.ndarray:
    """Torque predictions for a :class:`Dataset` (scaled with the model's scaler)
    or for an already standardized input array."""
    if isinstance(data, Dataset):
        if model.scaler is None:
            raise InvalidInputError("model has no scaler; pass standardized inputs")
        data = model.scaler.transform(data)
    elif model.scaler is not None and np.asarray(data).shape[-1] != len(model.scaler.mean):
        raise InvalidInputError("input channel count does not match the model's scaler")
    return forward(model, np.atleast_2d(np.asarray(data, dtype=float)))


# ---------------------------------------------------------------------------
# Serialization


def _fmt(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def save_model(model: MlpModel, path) -> Path:
    """Versioned text format: header, row-major arrays, ``key = value`` trailer."""
    path = Path(path)
    lines = [f"mlp {FORMAT_VERSION} " + " ".join(str(s) for s in model.sizes)]
    for W, b in zip(model.weights, model.biases):
        lines += [_fmt(row) for row in W]
        lines.append(_fmt(b))
    lines.append("# metadata")
    lines.append(f"best_epoch = {model.best_epoch}")
    lines.append(f"best_val_mse = {float(model.best_val_mse)!r}")
    lines.append(f"seed = {model.seed}")
    lines.append(f"mode = {model.mode}")
    if model.scaler is not None:
        lines.append(f"scaler_mean = {_fmt(model.scaler.mean)}")
        lines.append(f"scaler_std = {_fmt(model.scaler.std)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(path) -> MlpModel:
    from .dynamics import parse_keyvalue

    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split()
    if len(head) < 3 or head[0] != "mlp":
        raise InvalidInputError(f"{path}: not a model file")
    if int(head[1]) != FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported model format version {head[1]}")
    sizes = [int(s) for s in head[2:]]
    pos = 1
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = np.array([[float(v) for v in lines[pos + i].split()] for i in range(fan_out)])
        pos += fan_out
        b = np.array([float(v) for v in lines[pos].split()])
        pos += 1
        if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise InvalidInputError(f"{path}: layer shape does not match header")
        weights.append(W)
        biases.append(b)
    meta = parse_keyvalue("\n".join(lines[pos:]), str(path))
    scaler = None
    if "scaler_mean" in meta:
        scaler = Scaler(np.array([float(v) for v in meta["scaler_mean"].split()]),
                        np.array([float(v) for v in meta["scaler_std"].split()]))
    return MlpModel(weights, biases, scaler, int(meta.get("best_epoch", -1)),
                    float(meta.get("best_val_mse", "inf")), int(meta.get("seed", 0)),
                    meta.get("mode", "proposed"))
