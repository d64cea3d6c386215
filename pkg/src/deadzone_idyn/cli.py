"""Command line entry point: simulate -> prepare -> train -> sweep -> trace.

Exit status: 0 success, 1 data or runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import dynamics
from .dynamics import ExcitationSpec, LinkParams, SimConfig, parse_keyvalue
from .errors import InsufficientDataError, InvalidInputError, SimulationDivergedError
from .experiment import (ALL_METHODS, METHODS, PreparedData, SweepConfig, TraceReport, prepare,
                         run_sweep, run_trace, summary_stats, write_reports)
from .mlp import TrainConfig, load_model, save_model, train
from .ne import load_ne, ne_fit, save_ne

log = logging.getLogger("deadzone_idyn")

MODEL_FILES = {"ne": "ne.model", "conventional": "conventional.model", "proposed": "proposed.model"}
RUN_KEYS = {"alpha", "split_seed", "train_seed", "sweep_seed", "trials", "sizes", "jobs",
            "methods", "mode", "lr", "epochs", "batch_size"}


class UsageError(Exception):
    pass


def _sim_keys() -> set:
    return ({f.name for f in fields(LinkParams)} | {f.name for f in fields(SimConfig)}
            | {f.name for f in fields(ExcitationSpec)}) - {"excitation"}


def read_config(path) -> tuple[str, dict]:
    """Split a config file into simulator text and run-level settings."""
    if path is None:
        return "", {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        kv = parse_keyvalue(p.read_text(), str(p))
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    sim_keys = _sim_keys()
    unknown = set(kv) - sim_keys - RUN_KEYS
    if unknown:
        raise UsageError(f"{p}: unknown config keys {sorted(unknown)}")
    sim_text = "\n".join(f"{k} = {v}" for k, v in kv.items() if k in sim_keys)
    return sim_text, {k: v for k, v in kv.items() if k in RUN_KEYS}


def parse_sizes(text: str) -> tuple:
    """``a..b:step``, a comma list, or a single size."""
    text = str(text).strip()
    try:
        if ".." in text:
            span, _, step = text.partition(":")
            lo, hi = (int(v) for v in span.split(".."))
            step = int(step) if step else 1
            if step < 1 or hi < lo:
                raise ValueError
            sizes = tuple(range(lo, hi + 1, step))
        else:
            sizes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad --sizes value {text!r}; use a..b:step or a,b,c") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("sizes must be positive")
    return sizes


def _typed(run: dict, key: str, conv, flag_value=None):
    if flag_value is not None:
        return flag_value
    if key not in run:
        return None
    try:
        return conv(run[key])
    except (ValueError, UsageError) as exc:
        raise UsageError(f"bad config value for {key}: {run[key]!r}") from exc


def _train_config(run: dict, args) -> TrainConfig:
    cfg = TrainConfig()
    seed = _typed(run, "train_seed", int, getattr(args, "seed", None))
    lr = _typed(run, "lr", float)
    epochs = _typed(run, "epochs", int, getattr(args, "epochs", None))
    batch = _typed(run, "batch_size", int)
    cfg = replace(cfg, **{k: v for k, v in (("seed", seed), ("lr", lr), ("epochs", epochs),
                                             ("batch_size", batch)) if v is not None})
    try:
        return cfg.validate()
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args) -> int:
    sim_text, _ = read_config(args.config)
    try:
        cfg, params = dynamics.load_config(text=sim_text)
    except (InvalidInputError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out_dir(args.out)
    log.info("simulating %.1f s at %.0f Hz (seed %d)", cfg.duration, 1 / cfg.timestep, cfg.seed)
    traj = dynamics.simulate_trajectory(cfg, params)
    path = dynamics.write_trajectory_csv(traj, out / "trajectory.csv")
    (out / "simulation.cfg").write_text(dynamics.dump_config(cfg, params))
    log.info("wrote %d rows to %s", len(traj), path)
    return 0


def cmd_prepare(args) -> int:
    _, run = read_config(args.config)
    alpha = _typed(run, "alpha", float, args.alpha)
    seed = _typed(run, "split_seed", int, args.seed)
    alpha = 0.1 if alpha is None else alpha
    if alpha < 0:
        raise UsageError("alpha must be non-negative")
    raw = Path(args.raw)
    if not raw.is_file():
        raise UsageError(f"raw trajectory not found: {raw}")
    traj = dynamics.read_trajectory_csv(raw)
    data = prepare(traj, alpha=alpha, seed=0 if seed is None else seed)
    out = _out_dir(args.out)
    data.save(out)
    s = summary_stats(data)
    log.info("train %d, val %d, test %d, segment %d rows; all-moving fraction %.3f",
             len(data.train), len(data.val), len(data.test), len(data.segment),
             s["all_moving_fraction"])
    return 0


def cmd_train(args) -> int:
    _, run = read_config(args.config)
    mode = args.mode or run.get("mode")
    if mode not in MODEL_FILES:
        raise UsageError(f"unknown mode {mode!r}; choose from {sorted(MODEL_FILES)}")
    data = PreparedData.load(args.data)
    out = _out_dir(args.out)
    r = data.train_mask.r
    if mode == "ne":
        params = ne_fit(data.train, r)
        save_ne(params, out / MODEL_FILES[mode])
        log.info("ne: fitted on %d fully-moving rows", params.count)
        return 0
    tcfg = replace(_train_config(run, args), mode=mode)
    if mode == "proposed":
        log.info("proposed: training on all %d rows", len(data.train))
    else:
        keep = int(r.all(axis=1).sum())
        log.info("conventional: training on %d of %d rows (%.1f%%) with every joint moving",
                 keep, len(r), 100.0 * keep / len(r))
    model = train(data.train, data.val, r, tcfg, scaler=data.scaler)
    save_model(model, out / MODEL_FILES[mode])
    log.info("%s: best epoch %d of %d, validation MSE %.6g", mode, model.best_epoch + 1,
             tcfg.epochs, model.best_val_mse)
    return 0


def cmd_sweep(args) -> int:
    _, run = read_config(args.config)
    data = PreparedData.load(args.data)
    sizes = parse_sizes(args.sizes) if args.sizes else _typed(run, "sizes", parse_sizes)
    methods = args.methods or run.get("methods")
    methods = tuple(m.strip() for m in methods.split(",")) if methods else METHODS
    if set(methods) - set(ALL_METHODS):
        raise UsageError(f"unknown methods in {methods}")
    cfg = SweepConfig(
        sizes=sizes or SweepConfig().sizes,
        trials=_typed(run, "trials", int, args.trials) or 10,
        base_seed=_typed(run, "sweep_seed", int, args.seed) or 0,
        methods=methods,
        jobs=_typed(run, "jobs", int, args.jobs) or 1,
        train=_train_config(run, argparse.Namespace(epochs=getattr(args, "epochs", None))),
    )
    try:
        cfg.validate(len(data.train))
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    log.info("sweep: %d sizes x %d trials x %d methods", len(cfg.sizes), cfg.trials, len(methods))
    report = run_sweep(cfg, data)
    write_reports(_out_dir(args.out), sweep=report, summary=summary_stats(data))
    if report.failures:
        log.error("%d trials failed and were excluded", len(report.failures))
        return 1
    return 0


def cmd_trace(args) -> int:
    data = PreparedData.load(args.data)
    mdir = Path(args.models)
    missing = [f for f in MODEL_FILES.values() if not (mdir / f).is_file()]
    if missing:
        log.error("missing model files in %s: %s", mdir, missing)
        return 1
    models = {"ne": load_ne(mdir / MODEL_FILES["ne"]),
              "conventional": load_model(mdir / MODEL_FILES["conventional"]),
              "proposed": load_model(mdir / MODEL_FILES["proposed"])}
    report: TraceReport = run_trace(models, data.segment, data.sigma, data.alpha)
    write_reports(_out_dir(args.out), trace=report)
    log.info("flagged-span deviation from ne: proposed %.4g, conventional %.4g",
             report.flagged_deviation("proposed"), report.flagged_deviation("conventional"))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deadzone-idyn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate the arm and write the raw 500 Hz log")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", help="filter, mask and split a raw log")
    s.add_argument("--raw", required=True, help="trajectory CSV from 'simulate'")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one model on the full training pool")
    s.add_argument("--data", required=True, help="directory written by 'prepare'")
    s.add_argument("--mode", help="proposed, conventional or ne")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="sample-size sweep with confidence intervals")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--sizes")
    s.add_argument("--trials", type=int)
    s.add_argument("--methods", help="comma list from ne, conventional, proposed, ne_rigid")
    s.add_argument("--jobs", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("trace", help="predict the reserved 3 s segment with all three models")
    s.add_argument("--data", required=True)
    s.add_argument("--models", required=True, help="directory holding the three model files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trace)
    return p


def _setup_logging() -> None:
    level = os.environ.get("DEADZONE_IDYN_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (InsufficientDataError, SimulationDivergedError, InvalidInputError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
