"""Command-line entry point: ``swseg {generate,optimize,train,evaluate,report}``.

Configuration comes from built-in defaults, then ``--desk`` (laptop-sized
profile), then an optional ``--config`` JSON file, then individual flags.
``SWSEG_SEED`` in the environment overrides the seed from all of those.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from . import metrics as M
from .errors import CheckpointError, ConfigError, DataError, NumericError, SwsegError
from .objective import UNetObjective, config_from_decoded, fit
from .pso import SwarmConfig, optimize, read_swarm_csv, unet_space
from .train import TrainSettings, TrainTrace, binarize, predict
from .unet import UNetConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger("swseg")

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "depth": 5,
    "train_fraction": 0.8,
    "jobs": 1,
    "data": {
        "dir": None,
        "manifest": None,
        "size": 256,
        "synth": {"count": 200, "blobs": [1, 2], "radius": None,
                  "background": 40.0, "contrast": 120.0, "noise": 12.0},
    },
    "swarm": {"n_particles": 10, "iters": 10, "w": 0.9, "c1": 0.5, "c2": 0.3, "v_max_fraction": 0.5},
    "space": {"filter_values": [8, 16, 32, 64], "kernel": [3, 5], "lr": [0.0001, 0.01]},
    "train": {"epochs": 50, "batch_size": 16, "alpha": 0.5, "beta": 0.5, "smooth": 1e-6, "threshold": 0.5},
}

DESK = {"depth": 3, "data": {"size": 64}, "swarm": {"n_particles": 5, "iters": 5}, "train": {"epochs": 20}}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "desk", False):
        cfg = _merge(cfg, DESK)
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    flags = {
        "seed": ("seed",), "depth": ("depth",), "jobs": ("jobs",),
        "train_fraction": ("train_fraction",),
        "data_dir": ("data", "dir"), "manifest": ("data", "manifest"), "size": ("data", "size"),
        "count": ("data", "synth", "count"), "noise": ("data", "synth", "noise"),
        "particles": ("swarm", "n_particles"), "iters": ("swarm", "iters"),
        "w": ("swarm", "w"), "c1": ("swarm", "c1"), "c2": ("swarm", "c2"),
        "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"),
        "alpha": ("train", "alpha"), "beta": ("train", "beta"),
    }
    for attr, path in flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            node = cfg
            for key in path[:-1]:
                node = node[key]
            node[path[-1]] = val
    env_seed = os.environ.get("SWSEG_SEED")
    if env_seed:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"SWSEG_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def _swarm_config(cfg: dict) -> SwarmConfig:
    return SwarmConfig(seed=cfg["seed"], **cfg["swarm"]).validate()


def _train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(seed=cfg["seed"], **cfg["train"]).validate()


def _synth_spec(cfg: dict, count: Optional[int] = None) -> D.SynthSpec:
    s = dict(cfg["data"]["synth"])
    if count is not None:
        s["count"] = count
    s["blobs"] = tuple(s["blobs"])
    size = cfg["data"]["size"]
    # None scales the 64-px default (5..12 px semi-axes) to the image size.
    s["radius"] = (5.0 * size / 64, 12.0 * size / 64) if s["radius"] is None else tuple(s["radius"])
    return D.SynthSpec(size=cfg["data"]["size"], seed=cfg["seed"], **s).validate()


def load_splits(cfg: dict):
    """Resolve (train, val) from a manifest, a PNG directory, or the generator."""
    d = cfg["data"]
    if d.get("manifest"):
        return D.load_manifest(d["manifest"], size=d["size"])
    if d.get("dir"):
        directory = Path(d["dir"])
        if (directory / "manifest.json").exists():
            return D.load_manifest(directory / "manifest.json", size=d["size"])
        return D.split(D.load_png_dir(directory, size=d["size"]), cfg["train_fraction"], cfg["seed"])
    return D.split(D.generate(_synth_spec(cfg)), cfg["train_fraction"], cfg["seed"])


def _prepare_outdir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def evaluate_split(model, dataset: D.Dataset, out: Path, threshold: float = 0.5, identity: bool = False):
    """Write metrics.csv, metrics_summary.json and correlation.csv for ``dataset``."""
    truth = dataset.masks().astype(bool)
    if identity:
        pred = truth
    else:
        pred = binarize(predict(model, dataset.images())[:, 0], threshold)
    rows = [(s.id, M.evaluate(p, t)) for s, p, t in zip(dataset, pred, truth)]
    M.write_metrics_csv(rows, out / "metrics.csv")
    reports = [r for _, r in rows]
    _write_json(M.mean_report(reports), out / "metrics_summary.json")
    table = [[getattr(r, k) for k in M.SCALAR_FIELDS] for r in reports]
    if len(table) >= 3:
        M.write_matrix_csv(M.SCALAR_FIELDS, M.pearson_matrix(table), out / "correlation.csv")
    else:
        logger.warning("fewer than 3 samples; correlation matrix skipped")
    return reports


# -- subcommands --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_outdir(Path(args.out), args.force)
    dataset = D.generate(_synth_spec(cfg))
    D.write_png_dataset(dataset, out, cfg["train_fraction"], cfg["seed"])
    logger.info("wrote %d PNG pairs to %s", len(dataset), out)
    return 0


def cmd_optimize(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_outdir(Path(args.out), args.force)
    _write_json(cfg, out / "config.json")
    train_set, val_set = load_splits(cfg)
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation splits must both be non-empty")
    settings = _train_settings(cfg)
    space = unet_space(cfg["space"]["filter_values"], tuple(cfg["space"]["kernel"]), tuple(cfg["space"]["lr"]))
    objective = UNetObjective.from_datasets(train_set, val_set, settings, cfg["depth"])
    traces = out / "train_traces"
    traces.mkdir(exist_ok=True)

    def on_generation(t, trace):
        for e in trace.by_iteration(t):
            if "trace" in e.info:
                e.info["trace"].to_csv(traces / f"g{e.iteration:02d}_p{e.particle:02d}.csv")
        trace.to_csv(out / "swarm_trace.csv")

    result = optimize(space, objective, _swarm_config(cfg), jobs=cfg["jobs"], callback=on_generation)
    if not math.isfinite(result.best_f):
        raise NumericError("no candidate trained successfully")
    best = {
        "filters": int(result.best["filters"]),
        "kernel": int(result.best["kernel"]),
        "learning_rate": float(result.best["lr"]),
        "fitness": float(result.best_f),
        "dsc": float(1.0 - result.best_f),
    }
    _write_json(best, out / "best_config.json")

    final = fit(config_from_decoded(result.best, cfg["depth"]), train_set, val_set, settings)
    final.trace.to_csv(out / "final_train_trace.csv")
    save_checkpoint(final.model, out / "model.swseg", extra={"best_val_dsc": final.best_val_dsc})
    evaluate_split(final.model, val_set, out, settings.threshold)
    logger.info("best %s", best)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_outdir(Path(args.out), args.force)
    _write_json(cfg, out / "config.json")
    train_set, val_set = load_splits(cfg)
    settings = _train_settings(cfg)
    config = UNetConfig(args.filters, args.kernel, args.lr, depth=cfg["depth"]).validate()
    result = fit(config, train_set, val_set, settings)
    result.trace.to_csv(out / "train_trace.csv")
    save_checkpoint(result.model, out / "model.swseg", extra={"best_val_dsc": result.best_val_dsc})
    evaluate_split(result.model, val_set, out, settings.threshold)
    _write_json({"best_val_dsc": result.best_val_dsc, "best_epoch": result.best_epoch,
                 "final_val_dsc": result.final_val_dsc}, out / "train_summary.json")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = load_splits(cfg)
    dataset = {"val": val_set, "train": train_set,
               "all": D.Dataset(train_set.samples + val_set.samples)}[args.split]
    model = None
    if not args.identity:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint unless --identity is given")
        model = load_checkpoint(args.checkpoint)
        h, w = dataset[0].mask.shape
        try:
            model.config.check_spatial(h, w)
        except SwsegError as exc:
            raise CheckpointError(f"checkpoint incompatible with {h}x{w} data: {exc}") from exc
    evaluate_split(model, dataset, out, cfg["train"]["threshold"], identity=args.identity)
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    trace_path = run / "swarm_trace.csv"
    if not trace_path.exists():
        raise DataError(f"missing swarm trace: {trace_path}")
    rows = read_swarm_csv(trace_path)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    evals = [r for r in rows if r["particle"] != "gbest"]
    gbest = {int(r["iteration"]): r for r in rows if r["particle"] == "gbest"}

    with open(out / "parameter_evolution.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "particle", "filters", "kernel", "lr", "fitness"])
        for r in evals:
            w.writerow([r["iteration"], r["particle"], r["filters"], r["kernel"], r["lr"], r["fitness"]])

    with open(out / "convergence.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "gbest_fitness", "gbest_dsc_val", "best_val_dsc",
                    "mean_val_dsc", "best_train_dsc"])
        for g in sorted(gbest):
            gen = [r for r in evals if int(r["iteration"]) == g]
            vals = [(float(r["dsc_val"]), int(r["particle"])) for r in gen if r["dsc_val"]]
            best_val = max(vals) if vals else None
            train_dsc = ""
            if best_val is not None:
                tpath = run / "train_traces" / f"g{g:02d}_p{best_val[1]:02d}.csv"
                if tpath.exists():
                    tr = TrainTrace.from_csv(tpath)
                    best_epoch = max(tr.epochs, key=lambda e: (e.val_dsc, -e.epoch))
                    train_dsc = repr(best_epoch.train_dsc)
            w.writerow([
                g, gbest[g]["fitness"], gbest[g]["dsc_val"],
                "" if best_val is None else repr(best_val[0]),
                "" if not vals else repr(float(np.mean([v for v, _ in vals]))),
                train_dsc,
            ])
    return 0


# -- parser ------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--desk", action="store_true", help="5 particles, 5 iters, depth 3, 64 px, 20 epochs")
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    if data:
        p.add_argument("--data-dir", dest="data_dir", help="directory of <id>.png / <id>_mask.png pairs")
        p.add_argument("--manifest", help="dataset manifest.json")
        p.add_argument("--size", type=int, help="image side length after resizing")
        p.add_argument("--count", type=int, help="synthetic sample count")
        p.add_argument("--noise", type=float, help="synthetic noise stddev (gray levels)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic PNG dataset and manifest")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("optimize", help="PSO search over filters, kernel size and learning rate")
    _common(p)
    _train_flags(p)
    p.add_argument("--particles", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--w", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--c2", type=float)
    p.add_argument("--jobs", type=int, help="parallel worker processes for particle evaluation")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("train", help="train one configuration")
    _common(p)
    _train_flags(p)
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.006756673)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-sample metrics and correlation matrix")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--identity", action="store_true", help="score ground truth against itself")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="convergence and parameter-evolution CSVs from a run")
    p.add_argument("run")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SwsegError, OSError, ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, SwsegError):
            code = exc.exit_code
        else:
            code = 2 if isinstance(exc, OSError) else 1
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
