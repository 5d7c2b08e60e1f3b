"""Command-line entry point: ``afflab {dataset,pretrain,train,eval,bench,render}``.

Settings resolve as flag > config file section > built-in default. Each
command writes ``resolved_config.ini`` into its output directory so a run can
be repeated exactly with ``--config``. Wall-clock notes go to ``run.log`` only.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import affordance as aff
from . import binsim, convnet, labels
from . import pipeline as pl
from .errors import AfflabError, DataError
from .heightmap import NormStats, normalize

log = logging.getLogger("afflab")

EXIT_OK, EXIT_USAGE = 0, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv(kind):
    def parse(text):
        return tuple(kind(t) for t in str(text).replace(",", " ").split())
    return parse


# name -> (type, default) per command section
OPTIONS = {
    "global": {"seed": (int, 0), "out": (str, None)},
    "dataset": {"objects": (str, "train"), "scenes": (int, 200), "instances": (int, 10),
                "dir": (str, None)},
    "pretrain": {"task": (str, "foreground"), "dataset": (str, None), "steps": (int, 1500),
                 "lr": (float, 1e-2), "momentum": (float, 0.9), "batch": (int, 4),
                 "crop": (int, 32), "weights": (str, None)},
    "train": {"task": (str, "grasp"), "init": (str, "random"), "source": (str, None),
              "objects": (str, "train"), "attempts": (int, None), "lr": (float, 1e-3),
              "momentum": (float, 0.9), "batch": (int, 8), "tau": (float, 0.05),
              "stats": (str, None), "weights": (str, None)},
    "eval": {"task": (str, "grasp"), "weights": (str, None), "objects": (str, "test"),
             "attempts": (int, None), "stats": (str, None), "oracle": (bool, False),
             "scene_seed": (int, pl.CANONICAL_SEED)},
    "bench": {"seeds": (int, 5), "vision_tasks": (_csv(str), ("random",) + labels.TASKS),
              "strategies": (_csv(str), ("full",)), "tasks": (_csv(str), pl.AFFORDANCE_TASKS),
              "scenes": (int, 100), "pretrain_steps": (int, 1500), "pretrain_lr": (float, 1e-2),
              "suction_attempts": (int, 600), "grasp_attempts": (int, 1500), "lr": (float, 1e-3),
              "eval_runs": (int, 1), "jobs": (int, 1)},
    "render": {"task": (str, "suction"), "weights": (str, None), "objects": (str, "train"),
               "scene_seed": (int, pl.CANONICAL_SEED), "plane": (int, 0), "stats": (str, None)},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="afflab", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI file with [global] and per-command sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: $AFFLAB_OUT or ./afflab_out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", help="render scenes and write vision labels")
    d.add_argument("--objects")
    d.add_argument("--scenes", type=int)
    d.add_argument("--instances", type=int)
    d.add_argument("--dir", help="dataset directory (default: OUT/dataset)")

    t = sub.add_parser("pretrain", help="train a vision model on one passive task")
    t.add_argument("--task", choices=labels.TASKS)
    t.add_argument("--dataset")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--crop", type=int, help="random crop size; 0 trains on full images")
    t.add_argument("--weights", help="output weights (default: OUT/vision_TASK.anp1)")

    f = sub.add_parser("train", help="fine-tune an affordance model by trial and error")
    f.add_argument("--task", choices=pl.AFFORDANCE_TASKS)
    f.add_argument("--init", choices=pl.STRATEGIES)
    f.add_argument("--from", dest="source")
    f.add_argument("--objects")
    f.add_argument("--attempts", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--momentum", type=float)
    f.add_argument("--batch", type=int)
    f.add_argument("--tau", type=float)
    f.add_argument("--stats", help="normalization stats JSON")
    f.add_argument("--weights", help="output weights (default: OUT/affordance_TASK.anp1)")

    e = sub.add_parser("eval", help="greedy test run from the canonical arrangement")
    e.add_argument("--task", choices=pl.AFFORDANCE_TASKS)
    e.add_argument("--weights")
    e.add_argument("--objects")
    e.add_argument("--attempts", type=int)
    e.add_argument("--stats")
    e.add_argument("--oracle", action="store_const", const=True)
    e.add_argument("--scene-seed", type=int)

    b = sub.add_parser("bench", help="pretrain -> transfer -> fine-tune -> evaluate grid")
    b.add_argument("--seeds", type=int, help="number of seeds, starting at --seed")
    b.add_argument("--vision-tasks", type=_csv(str))
    b.add_argument("--strategies", type=_csv(str))
    b.add_argument("--tasks", type=_csv(str))
    b.add_argument("--scenes", type=int)
    b.add_argument("--pretrain-steps", type=int)
    b.add_argument("--pretrain-lr", type=float)
    b.add_argument("--suction-attempts", type=int)
    b.add_argument("--grasp-attempts", type=int)
    b.add_argument("--lr", type=float)
    b.add_argument("--eval-runs", type=int)
    b.add_argument("--jobs", type=int, help="parallel worker processes")

    r = sub.add_parser("render", help="write affordance heatmap and overlay PNGs")
    r.add_argument("--task", choices=pl.AFFORDANCE_TASKS)
    r.add_argument("--weights", help="model weights (default: random init from --seed)")
    r.add_argument("--objects")
    r.add_argument("--scene-seed", type=int)
    r.add_argument("--plane", type=int, help="grasp rotation plane 0..15")
    r.add_argument("--stats")
    return p


def _convert(kind, text):
    if kind is bool:
        return str(text).strip().lower() in ("1", "true", "yes", "on")
    return kind(text)


def resolve(args, config_text: str | None = None) -> dict:
    """Merge flags over config-file values over defaults for the chosen command."""
    cp = configparser.ConfigParser()
    if config_text:
        cp.read_string(config_text)
    resolved = {}
    for section in ("global", args.command):
        vals = {}
        for name, (kind, default) in OPTIONS[section].items():
            flag = getattr(args, name, None)
            if flag is not None:
                vals[name] = flag
            elif cp.has_option(section, name):
                vals[name] = _convert(kind, cp.get(section, name))
            else:
                vals[name] = default
        resolved[section] = vals
    if resolved["global"]["out"] is None:
        resolved["global"]["out"] = os.environ.get("AFFLAB_OUT", "afflab_out")
    return resolved


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return " ".join(map(str, v))
    return "" if v is None else str(v)


def write_resolved(resolved: dict, out: Path) -> None:
    cp = configparser.ConfigParser()
    for section, vals in resolved.items():
        cp[section] = {k: _fmt(v) for k, v in vals.items() if v is not None}
    with open(out / "resolved_config.ini", "w") as f:
        cp.write(f)


# -- helpers ----------------------------------------------------------------

def _read_stats(path) -> NormStats:
    p = Path(path)
    if not p.exists():
        raise DataError(f"normalization stats {p} not found")
    return NormStats.from_dict(json.loads(p.read_text()))


def _write_stats(stats: NormStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2) + "\n")


def _stats_for(opts, seed: int, weights: str | None) -> NormStats:
    """Explicit stats, else the sidecar of the weights, else a fresh 20-scene sample."""
    if opts.get("stats"):
        return _read_stats(opts["stats"])
    if weights and Path(weights + ".stats.json").exists():
        return _read_stats(weights + ".stats.json")
    return pl.run_dataset(seed, 20).norm_stats


def _load_weights(path) -> convnet.NetParams:
    if not Path(path).exists():
        raise DataError(f"weights file {path} not found")
    return convnet.load_params(path)


def _out_path(value, out: Path, default_name: str) -> Path:
    return Path(value) if value else out / default_name


# -- commands ---------------------------------------------------------------

def cmd_dataset(opts, g, out: Path) -> dict:
    if opts["scenes"] < 1:
        raise UsageError("--scenes must be >= 1")
    d = _out_path(opts["dir"], out, "dataset")
    ds = labels.build_dataset(opts["objects"], opts["scenes"], g["seed"],
                              n_instances=opts["instances"])
    labels.save_dataset(ds, d)
    return {"dataset": str(d), "scenes": len(ds)}


def cmd_pretrain(opts, g, out: Path) -> dict:
    d = _out_path(opts["dataset"], out, "dataset")
    ds = labels.load_dataset(d)
    cfg = pl.PretrainConfig(opts["steps"], opts["lr"], opts["momentum"], opts["batch"],
                            opts["crop"] or None)
    if cfg.steps < 0:
        raise UsageError("--steps must be >= 0")
    params, losses = pl.pretrain_vision(opts["task"], ds, cfg.steps, g["seed"], cfg)
    w = _out_path(opts["weights"], out, f"vision_{opts['task']}.anp1")
    convnet.save_params(params, w)
    _write_stats(ds.norm_stats, str(w) + ".stats.json")
    pl.write_csv([{"step": i, "loss": v} for i, v in enumerate(losses)],
                 out / f"pretrain_{opts['task']}_curve.csv", ("step", "loss"))
    return {"weights": str(w), "steps": cfg.steps, "final_loss": losses[-1] if losses else None}


def cmd_train(opts, g, out: Path) -> dict:
    if opts["init"] != "random" and not opts["source"]:
        raise UsageError(f"--init {opts['init']} needs --from")
    attempts = opts["attempts"]
    if attempts is None:
        attempts = {"suction": 600, "grasp": 1500}[opts["task"]]
    if attempts < 0:
        raise UsageError("--attempts must be >= 0")
    source = _load_weights(opts["source"]) if opts["source"] else None
    strategy = pl.TransferStrategy(opts["init"], source if opts["init"] != "random" else None)
    stats = _stats_for(opts, g["seed"], opts["source"])
    run = pl.RunConfig(task=opts["task"], object_set=opts["objects"], seeds=(g["seed"],),
                       attempts=attempts, lr=opts["lr"], momentum=opts["momentum"],
                       batch_size=opts["batch"], tau=opts["tau"])
    params = pl.init_affordance(strategy, g["seed"])
    params, curve = pl.train_affordance(pl.Env.make(opts["objects"]), params, run, stats, g["seed"])
    w = _out_path(opts["weights"], out, f"affordance_{opts['task']}.anp1")
    convnet.save_params(params, w)
    _write_stats(stats, str(w) + ".stats.json")
    curve.write_csv(out / f"train_{opts['task']}_curve.csv")
    return {"weights": str(w), "attempts": len(curve), "final_running_rate": curve.final_rate}


def cmd_eval(opts, g, out: Path) -> dict:
    env = pl.Env.make(opts["objects"])
    run = pl.RunConfig(task=opts["task"], object_set=opts["objects"], eval_attempts=opts["attempts"])
    if opts["oracle"]:
        res = pl.evaluate(env, None, run, None, policy="oracle", seed=opts["scene_seed"])
    else:
        if not opts["weights"]:
            raise UsageError("eval needs --weights (or --oracle)")
        params = _load_weights(opts["weights"])
        res = pl.evaluate(env, params, run, _stats_for(opts, g["seed"], opts["weights"]),
                          seed=opts["scene_seed"])
    record = {"task": opts["task"], "objects": opts["objects"],
              "policy": "oracle" if opts["oracle"] else "greedy",
              "successes": res.successes, "attempts": res.attempts, "success_rate": res.success_rate,
              "log": [{"attempt": a, "pixel": list(map(int, p)), "angle_index": int(k),
                       "label": int(y), "reason": why} for a, p, k, y, why in res.log]}
    (out / f"eval_{opts['task']}_{opts['objects']}.json").write_text(json.dumps(record, indent=2) + "\n")
    return record


def cmd_bench(opts, g, out: Path) -> dict:
    if opts["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    run = pl.RunConfig(lr=opts["lr"], eval_seeds=tuple(pl.CANONICAL_SEED - i for i in range(opts["eval_runs"])))
    cfg = pl.BenchConfig(
        vision_tasks=tuple(opts["vision_tasks"]), strategies=tuple(opts["strategies"]),
        tasks=tuple(opts["tasks"]), seeds=tuple(range(g["seed"], g["seed"] + opts["seeds"])),
        dataset_scenes=opts["scenes"],
        pretrain=pl.PretrainConfig(steps=opts["pretrain_steps"], lr=opts["pretrain_lr"]),
        attempts={"suction": opts["suction_attempts"], "grasp": opts["grasp_attempts"]},
        run=run, jobs=opts["jobs"])
    rows = pl.write_report(pl.benchmark(cfg), out)
    return {"report": str(out / "report.csv"), "rows": len(rows)}


def _png(array: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(array)).save(path)


def _heat_rgb(v: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) ramp, uint8."""
    v = np.clip(v, 0.0, 1.0)
    rgb = np.stack([v, 1.0 - np.abs(2.0 * v - 1.0), 1.0 - v], axis=-1)
    return (rgb * 255).round().astype(np.uint8)


def cmd_render(opts, g, out: Path) -> dict:
    k = opts["plane"]
    if opts["task"] == "suction" and k != 0 or not 0 <= k < aff.N_ANGLES:
        raise UsageError("--plane must be 0 for suction and in 0..15 for grasp")
    params = _load_weights(opts["weights"]) if opts["weights"] else convnet.init_params(g["seed"])
    stats = _stats_for(opts, g["seed"], opts["weights"])
    scene = binsim.reset(opts["objects"], binsim.SimConfig().n_instances, opts["scene_seed"])
    hm = binsim.render(scene)
    x = normalize(hm, stats)
    if opts["task"] == "suction":
        values = aff.predict_suction(params, x).values[0]
        rgb = hm.rgb
    else:
        xr, _ = aff.rotate_input(x, k, "bilinear")
        values = aff.probability(convnet.forward(params, xr, keep_cache=False)[0])
        rgb = np.transpose(aff.rotate_input(np.transpose(hm.rgb, (2, 0, 1)).astype(np.float32), k)[0], (1, 2, 0))
    gray = (np.clip(values, 0.0, 1.0) * 255).round().astype(np.uint8)
    overlay = (0.5 * np.clip(rgb, 0, 1) * 255 + 0.5 * _heat_rgb(values)).round().astype(np.uint8)
    stem = f"{opts['task']}_plane{k:02d}"
    _png(gray, out / f"{stem}_heatmap.png")
    _png(overlay, out / f"{stem}_overlay.png")
    np.save(out / f"{stem}_values.npy", values)
    fg = labels.foreground_mask(hm).labels > 0
    if opts["task"] == "grasp":
        fg = aff.rotate_input(fg[None].astype(np.float32), k, "nearest")[0][0] > 0.5
    return {"heatmap": str(out / f"{stem}_heatmap.png"), "mean": float(values.mean()),
            "std": float(values.std()),
            "mean_foreground": float(values[fg].mean()) if fg.any() else None,
            "mean_background": float(values[~fg].mean()) if (~fg).any() else None}


COMMANDS = {"dataset": cmd_dataset, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench, "render": cmd_render}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        text = None
        if args.config:
            if not Path(args.config).exists():
                raise UsageError(f"config file {args.config} not found")
            text = Path(args.config).read_text()
        resolved = resolve(args, text)
        out = Path(resolved["global"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger()
        root.addHandler(handler)
        root.setLevel(logging.INFO if args.verbose else logging.WARNING)
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        try:
            write_resolved(resolved, out)
            t0 = time.time()
            result = COMMANDS[args.command](resolved[args.command], resolved["global"], out)
            log.info("%s finished in %.1fs", args.command, time.time() - t0)
        finally:
            root.removeHandler(handler)
            log.removeHandler(handler)
            handler.close()
        summary = {k: v for k, v in result.items() if k != "log"}
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    except UsageError as e:
        print(f"afflab: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AfflabError as e:
        print(f"afflab: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"afflab: invalid value: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
