"""Command-line entry points: gen, train, eval, flops.

Exit codes: 0 success, 2 I/O failure, 3 configuration error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import multiprocessing
import os
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from .checkpoint import TrainState, atomic_write, load_checkpoint, save_checkpoint
from .coop_fusion import AsrPolicy
from .errors import ConfigError, DecodeError, TrainingError
from .harness import (
    REGISTRY, Config, Scenario, estimate_fusion_flops, make_scenario, observe, parse_configs,
    run_scenario, scenario_seeds, train,
)
from .metrics import dataset_metrics, mean_average_precision

log = logging.getLogger("v2xfuse")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
METRIC_COLUMNS = ("precision", "recall", "mean_iou_3d", "pos_rmse", "rot_rmse", "map_3d")
INDEX_NAME = "index.json"


class Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = round(time.perf_counter() - self.t, 6)

        return _Stage()


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _write_manifest(out: Path, command: str, args, seeds, timer: Timer, extra: Optional[dict] = None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": os.path.abspath(args.config) if args.config else None,
        "out": str(out.resolve()),
        "seeds": seeds,
        "timings": timer.stages,
        **(extra or {}),
    }
    atomic_write(out / "manifest.json", _dump(manifest))


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def _load_config(args) -> Config:
    return Config.load(args.config) if args.config else Config()


def _read_index(directory: Path) -> dict:
    with open(directory / INDEX_NAME) as fh:
        index = json.load(fh)
    if index.get("format") != "v2xfuse-index":
        raise ConfigError(f"{directory / INDEX_NAME} is not a scenario index")
    return index


def load_scenarios(directory) -> list:
    directory = Path(directory)
    out = []
    for entry in _read_index(directory)["scenarios"]:
        with open(directory / entry["file"]) as fh:
            out.append(Scenario.from_dict(json.load(fh)))
    return out


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    sc = cfg.raw["scenes"]
    count = sc["count"] if args.count is None else args.count
    seed = sc["seed"] if args.seed is None else args.seed
    if count < 0:
        raise ConfigError("--count must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = Timer()
    seeds = scenario_seeds(seed, count)
    entries = []
    with timer("generate"):
        for i, s in enumerate(seeds):
            scenario = make_scenario(cfg, s)
            name = f"scene_{i:05d}.json"
            atomic_write(out / name, _dump(scenario.to_dict()))
            entries.append({"file": name, "seed": s, "objects": len(scenario.scene.objects)})
    index = {"format": "v2xfuse-index", "version": 1, "base_seed": seed, "scenarios": entries,
             "total_objects": sum(e["objects"] for e in entries)}
    atomic_write(out / INDEX_NAME, _dump(index))
    _write_manifest(out, "gen", args, {"base_seed": seed, "scenario_seeds": seeds}, timer)
    log.info("wrote %d scenarios to %s", count, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = Timer()
    with timer("load"):
        scenarios = load_scenarios(args.scenarios)
    if not scenarios:
        raise ConfigError("no scenarios to train on")
    epochs = cfg.raw["train"]["epochs"] if args.epochs is None else args.epochs
    seed = cfg.raw["train"]["seed"] if args.seed is None else args.seed
    ckpt = out / "model.ckpt"
    loss_path = out / "loss.csv"
    rows = []
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        if loss_path.exists():
            with open(loss_path) as fh:
                rows = list(csv.reader(fh))[1:][: state.step]
        log.info("resuming at step %d", state.step)
    else:
        m = cfg.raw["model"]
        state = TrainState.fresh(int(m["init_seed"]), int(m["c_bev"]), int(m["depth_bins"]))
        state.seed = seed
    header = ("step", "epoch", "scene", "config", "loss", "lr")

    def on_step(step, epoch, idx, scenario_cfg, loss, lr):
        rows.append([str(step), str(epoch), str(idx), scenario_cfg.token, repr(loss), repr(lr)])

    def on_epoch(epoch, st):
        # checkpoint and log stay in step so a later --resume picks up exactly here
        save_checkpoint(st, ckpt)
        atomic_write(loss_path, _csv_bytes(header, rows))
        log.info("epoch %d done, last loss %s", epoch, rows[-1][4])

    with timer("observe"):
        obs = [observe(s, state.meta.get("depth_bins", 8)) for s in scenarios]
    try:
        with timer("train"):
            train(state, scenarios, epochs, cfg, obs, on_step=on_step, on_epoch=on_epoch)
    except TrainingError as exc:
        atomic_write(loss_path, _csv_bytes(header, rows))
        log.error("training failed: %s", exc)
        return EXIT_NUMERIC
    save_checkpoint(state, ckpt)
    atomic_write(loss_path, _csv_bytes(header, rows))
    _write_manifest(out, "train", args, {"train_seed": state.seed, "init_seed": cfg.raw["model"]["init_seed"]},
                    timer, {"scenarios": os.path.abspath(args.scenarios), "epochs": epochs, "steps": state.step})
    return EXIT_OK


_WORKER: dict = {}


def _init_worker(model_path, configs, policy):
    _WORKER.update(model=load_checkpoint(model_path), configs=configs, policy=policy)


def _detect(scenario: Scenario):
    model, configs, policy = _WORKER["model"], _WORKER["configs"], _WORKER["policy"]
    obs = observe(scenario, model.meta.get("depth_bins", 8))
    return [run_scenario(scenario, c, model, policy, obs)[0] for c in configs]


def evaluate(model_path, scenarios, configs, policy: AsrPolicy, iou_threshold: float,
             score_threshold: float, jobs: int = 1) -> list:
    """One dict per configuration with the metric columns; order follows ``configs``."""
    if jobs > 1:
        # spawn keeps workers independent of the parent's state
        with multiprocessing.get_context("spawn").Pool(
                jobs, _init_worker, (str(model_path), configs, policy)) as pool:
            per_scene = pool.map(_detect, scenarios, chunksize=1)
    else:
        _init_worker(model_path, configs, policy)
        per_scene = [_detect(s) for s in scenarios]
    table = []
    for k, c in enumerate(configs):
        frames = [(dets[k], list(s.scene.objects)) for dets, s in zip(per_scene, scenarios)]
        m = dataset_metrics(frames, iou_threshold, score_threshold)
        table.append({"config": c.token, "precision": m.precision, "recall": m.recall,
                      "mean_iou_3d": m.mean_iou, "pos_rmse": m.pos_rmse, "rot_rmse": m.rot_rmse,
                      "map_3d": mean_average_precision(frames, iou_threshold),
                      "tp": m.tp, "fp": m.fp, "fn": m.fn})
    return table


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    configs = parse_configs(args.configs)
    iou = cfg.raw["eval"]["iou_threshold"] if args.iou_threshold is None else args.iou_threshold
    if not 0 < iou <= 1:
        raise ConfigError("--iou-threshold must lie in (0, 1]")
    score = cfg.raw["eval"]["score_threshold"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = Timer()
    load_checkpoint(args.model)  # fail early on a bad model file
    scenarios = load_scenarios(args.scenarios)
    with timer("evaluate"):
        table = evaluate(args.model, scenarios, configs, cfg.policy, iou, score, max(1, args.jobs))
    cols = ("config",) + METRIC_COLUMNS + ("tp", "fp", "fn")
    atomic_write(out / "metrics.csv", _csv_bytes(cols, [[_fmt(r[c]) if c != "config" else r[c] for c in cols]
                                                         for r in table]))
    atomic_write(out / "metrics.json", _dump({"iou_threshold": iou, "score_threshold": score, "rows": table}))
    atomic_write(out / "metrics_long.csv", _csv_bytes(
        ("config", "metric", "value"), [[r["config"], c, _fmt(r[c])] for r in table for c in METRIC_COLUMNS]))
    _write_manifest(out, "eval", args, {}, timer,
                    {"model": os.path.abspath(args.model), "scenarios": os.path.abspath(args.scenarios),
                     "configs": [c.token for c in configs], "iou_threshold": iou})
    for r in table:
        print(r["config"], " ".join(f"{c}={_fmt(r[c]) or 'undefined'}" for c in METRIC_COLUMNS))
    return EXIT_OK


def flops_report(policy: AsrPolicy, h: int, w: int, c: int) -> dict:
    rows = []
    for cfg in REGISTRY:
        r = estimate_fusion_flops(cfg, policy, h, w, c)
        rows.append({"config": r.config, "macs_with_asr": r.macs_with_asr,
                     "macs_without_asr": r.macs_without_asr, "reduction": r.reduction})
    het = [r["reduction"] for r, cfg in zip(rows, REGISTRY) if cfg.heterogeneous]
    return {"policy": [policy.s_high, policy.s_medium, policy.s_low], "grid": [h, w], "channels": c,
            "rows": rows, "heterogeneous_mean_reduction": sum(het) / len(het)}


def _parse_policy(text: str) -> AsrPolicy:
    try:
        hi, med, lo = (int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"--policy expects three comma-separated integers, got {text!r}") from None
    return AsrPolicy(hi, med, lo)


def _parse_grid(text: str) -> tuple:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid expects HxW, got {text!r}") from None
    return h, w


def cmd_flops(args) -> int:
    cfg = _load_config(args)
    policy = _parse_policy(args.policy) if args.policy else cfg.policy
    h, w = _parse_grid(args.grid) if args.grid else cfg.grid.shape
    report = flops_report(policy, h, w, int(cfg.raw["model"]["c_bev"]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "flops.json", _dump(report))
    for r in report["rows"]:
        print(f"{r['config']:6s} {r['macs_with_asr']:>12d} {r['macs_without_asr']:>12d} {r['reduction']:.4f}")
    print(f"heterogeneous mean reduction {report['heterogeneous_mean_reduction']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; unspecified keys take defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="v2xfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate scenario files")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int, help="number of scenarios (default from config)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model on generated scenarios")
    t.add_argument("--scenarios", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="configuration and scene-order sampling seed")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt if present")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="per-configuration detection metrics")
    e.add_argument("--model", required=True)
    e.add_argument("--scenarios", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--configs", default="all")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--iou-threshold", type=float)
    e.add_argument("--seed", type=int, help="accepted for interface symmetry; evaluation draws no randomness")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", parents=[common], help="fusion-stage MAC counts with and without ASR")
    f.add_argument("--policy", help="s_high,s_medium,s_low (default from config)")
    f.add_argument("--grid", help="HxW in cells (default from config)")
    f.add_argument("--out")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError, KeyError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (OSError, DecodeError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except TrainingError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
