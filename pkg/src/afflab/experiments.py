"""Seeded transfer experiments with an on-disk result cache.

Each (vision task, strategy, affordance task, seed) run is stored as one
JSON file keyed by its configuration, so long experiments can be resumed
and re-read by the acceptance tests without recomputation.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import convnet
from . import pipeline as pl

log = logging.getLogger(__name__)


@dataclass
class TransferSpec:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dataset_scenes: int = 100
    pretrain: pl.PretrainConfig = field(default_factory=lambda: pl.PretrainConfig(steps=1500, lr=1e-2))
    attempts: dict = field(default_factory=lambda: {"suction": 600, "grasp": 1500})
    run: pl.RunConfig = field(default_factory=pl.RunConfig)
    zero_shot_attempts: int = 100

    def key(self, *parts) -> dict:
        d = asdict(self)
        d.pop("seeds")
        d["job"] = list(parts)
        return json.loads(json.dumps(d, default=list))


def _cached(path: Path, key: dict, compute):
    if path.exists():
        rec = json.loads(path.read_text())
        if rec.get("key") == key:
            return rec
    rec = compute()
    rec["key"] = key
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(rec, indent=1) + "\n")
    tmp.replace(path)
    return rec


def _vision(spec: TransferSpec, vision_task: str, seed: int, cache: Path):
    ds = pl.run_dataset(seed, spec.dataset_scenes)
    if vision_task == "random":
        return None, ds.norm_stats
    w = cache / "weights" / f"{vision_task}_seed{seed}.anp1"
    key = spec.key("pretrain", vision_task, seed)

    def compute():
        t0 = time.time()
        params, losses = pl.pretrain_vision(vision_task, ds, spec.pretrain.steps, seed, spec.pretrain)
        w.parent.mkdir(parents=True, exist_ok=True)
        convnet.save_params(params, w)
        return {"final_loss": float(sum(losses[-50:]) / max(1, len(losses[-50:]))),
                "seconds": time.time() - t0}

    _cached(w.with_suffix(".json"), key, compute)
    return convnet.load_params(w), ds.norm_stats


def transfer_run(spec: TransferSpec, vision_task: str, strategy: str, task: str, seed: int,
                 cache) -> dict:
    """Pretrain (cached), initialize, record zero-shot success, fine-tune, evaluate."""
    cache = Path(cache)
    path = cache / task / f"{vision_task}_{strategy}_seed{seed}.json"
    key = spec.key(vision_task, strategy, task, seed)

    def compute():
        source, stats = _vision(spec, vision_task, seed, cache)
        params = pl.init_affordance(pl.TransferStrategy(strategy, source), seed)
        env = pl.Env.make("train")
        t0 = time.time()
        zero = (pl.zero_shot_rate(env, params, task, stats, spec.zero_shot_attempts, seed,
                                  spec.run.rotation_mode, tau=spec.run.tau)
                if spec.zero_shot_attempts else None)
        run = pl.RunConfig(**{**asdict(spec.run), "task": task, "seeds": (seed,),
                              "attempts": spec.attempts[task]})
        t1 = time.time()
        params, curve = pl.train_affordance(env, params, run, stats, seed)
        t2 = time.time()
        rates = {o: pl.evaluate_runs(pl.Env.make(o), params, run, stats) for o in ("train", "test")}
        log.info("%s/%s/%s seed %d: zero %s final %.3f unseen %.3f (%.0fs)", vision_task, strategy,
                 task, seed, zero, curve.final_rate, rates["test"], t2 - t1)
        return {"vision_task": vision_task, "strategy": strategy, "task": task, "seed": seed,
                "zero_shot": zero, "final_rate": curve.final_rate, "success": curve.success,
                "rates": rates, "train_seconds": t2 - t1, "seconds": time.time() - t0}

    return _cached(path, key, compute)


def pretrain_seconds(cache, vision_task: str, seed: int) -> float:
    """Recorded pre-training time of a cached vision model (0 if none)."""
    f = Path(cache) / "weights" / f"{vision_task}_seed{seed}.json"
    return json.loads(f.read_text())["seconds"] if f.exists() else 0.0


def transfer_grid(spec: TransferSpec, cells, cache) -> list[dict]:
    """``cells`` is a list of (vision_task, strategy, task); runs every seed of each."""
    return [transfer_run(spec, v, s, t, seed, cache) for v, s, t in cells for seed in spec.seeds]


GRASP_ORDERING = [("foreground", "full", "grasp"), ("foreground", "backbone_only", "grasp"),
                  ("random", "random", "grasp")]
SUCTION_TRANSFER = [("flat_surface", "full", "suction"), ("random", "random", "suction")]
