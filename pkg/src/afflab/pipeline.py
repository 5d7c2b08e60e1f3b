"""Vision pre-training, weight transfer, interactive fine-tuning and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import affordance as aff
from . import binsim, convnet
from .binsim import SimConfig
from .convnet import NetParams
from .errors import BinOverfull, EmptyScene, IncompatibleArchitecture
from .heightmap import Heightmap, NormStats, normalize
from .labels import TASKS as VISION_TASKS
from .labels import VisionDataset, build_dataset
from .replay import ReplayBuffer, Transition

log = logging.getLogger(__name__)

STRATEGIES = ("random", "backbone_only", "full")
AFFORDANCE_TASKS = ("suction", "grasp")
CANONICAL_SEED = 999
EVAL_ATTEMPTS = {"train": 25, "test": 15}


# -- configs ----------------------------------------------------------------

@dataclass
class Env:
    """A simulator instance: object catalog plus scene geometry."""

    object_set: str
    shapes: list
    sim: SimConfig = field(default_factory=SimConfig)

    @classmethod
    def make(cls, object_set: str = "train", sim: SimConfig | None = None) -> "Env":
        return cls(object_set, binsim.load_catalog(object_set), sim or SimConfig())

    def reset(self, seed: int, n_instances: int | None = None) -> binsim.Scene:
        n = self.sim.n_instances if n_instances is None else n_instances
        return binsim.reset(self.shapes, n, seed, self.sim)


@dataclass
class TransferStrategy:
    kind: str = "random"
    source: NetParams | str | Path | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind != "random" and self.source is None:
            raise ValueError(f"strategy {self.kind!r} needs a source model")


@dataclass
class PretrainConfig:
    steps: int = 1500
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    crop: int | None = 32  # random square crops; None trains on full images


@dataclass
class RunConfig:
    task: str = "grasp"
    object_set: str = "train"
    seeds: tuple[int, ...] = (0,)
    attempts: int = 1500
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    replay_capacity: int = 2000
    alpha: float = 0.6
    exploration: str = "boltzmann"
    tau: float = 0.05
    reset_every: int = 30
    window: int = 50
    rotation_mode: str = "bilinear"
    eval_attempts: int | None = None
    eval_seeds: tuple[int, ...] = (CANONICAL_SEED,)

    def __post_init__(self):
        if self.task not in AFFORDANCE_TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.attempts < 0 or not self.seeds:
            raise ValueError("attempts must be >= 0 and seeds non-empty")


# -- curves -----------------------------------------------------------------

@dataclass
class Curve:
    attempt: list[int] = field(default_factory=list)
    success: list[int] = field(default_factory=list)
    running_rate: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    window: int = 50

    def __len__(self):
        return len(self.attempt)

    def add(self, success: int, loss: float) -> None:
        self.attempt.append(len(self.attempt))
        self.success.append(int(success))
        tail = self.success[-self.window:]
        self.running_rate.append(sum(tail) / len(tail))
        self.loss.append(float(loss))

    @property
    def final_rate(self) -> float:
        return self.running_rate[-1] if self.running_rate else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["attempt", "success", "running_rate", "loss"])
            for row in zip(self.attempt, self.success, self.running_rate, self.loss):
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])

    @classmethod
    def read_csv(cls, path, window: int = 50) -> "Curve":
        c = cls(window=window)
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                c.attempt.append(int(row["attempt"]))
                c.success.append(int(row["success"]))
                c.running_rate.append(float(row["running_rate"]))
                c.loss.append(float(row["loss"]))
        return c


# -- vision pre-training ----------------------------------------------------

def _loss_and_grads(params: NetParams, x, target, mask):
    logits, cache = convnet.forward(params, x)
    rep = convnet.bce_loss_masked(logits, target, mask)
    return rep, convnet.backward(params, cache, rep.grad_logits), logits


def pretrain_vision(task: str, dataset: VisionDataset, steps: int, seed: int,
                    config: PretrainConfig | None = None, params: NetParams | None = None):
    """Fit the network to one vision task with per-pixel BCE over every valid pixel.

    Returns ``(params, losses)`` where ``losses[i]`` is the batch loss of step i.
    """
    if task not in VISION_TASKS:
        raise ValueError(f"unknown vision task {task!r}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = config or PretrainConfig()
    rng = np.random.default_rng(seed)
    params = params or convnet.init_params(seed)
    inputs = np.stack([normalize(hm, dataset.norm_stats) for hm, _ in dataset.entries])
    targets = dataset.targets(task)
    valid = np.stack([hm.valid for hm, _ in dataset.entries])
    H, W = targets.shape[1:]
    crop = cfg.crop if cfg.crop and cfg.crop < min(H, W) else None
    velocity, losses = None, []
    for _ in range(steps):
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        if crop:
            r0 = rng.integers(H - crop + 1, size=cfg.batch_size)
            c0 = rng.integers(W - crop + 1, size=cfg.batch_size)
            sl = [(slice(r, r + crop), slice(c, c + crop)) for r, c in zip(r0, c0)]
            x = np.stack([inputs[i][:, a, b] for i, (a, b) in zip(idx, sl)])
            y = np.stack([targets[i][a, b] for i, (a, b) in zip(idx, sl)])
            m = np.stack([valid[i][a, b] for i, (a, b) in zip(idx, sl)])
        else:
            x, y, m = inputs[idx], targets[idx], valid[idx]
        rep, grads, _ = _loss_and_grads(params, x, y, m)
        params, velocity = convnet.sgd_step(params, grads, cfg.lr, cfg.momentum, velocity)
        losses.append(rep.loss)
    return params, losses


def pixel_accuracy(params: NetParams, dataset: VisionDataset, task: str) -> float:
    correct = total = 0
    for hm, labels in dataset.entries:
        logits, _ = convnet.forward(params, normalize(hm, dataset.norm_stats), keep_cache=False)
        pred = logits > 0
        m = hm.valid
        correct += int((pred[m] == (labels[task].labels[m] > 0)).sum())
        total += int(m.sum())
    return correct / total


# -- transfer ---------------------------------------------------------------

def init_affordance(strategy: TransferStrategy, seed: int) -> NetParams:
    fresh = convnet.init_params(seed)
    if strategy.kind == "random":
        return fresh
    src = strategy.source
    if not isinstance(src, NetParams):
        src = convnet.load_params(src)
    if src.fingerprint != convnet.FINGERPRINT:
        raise IncompatibleArchitecture("source model has a different architecture")
    if strategy.kind == "full":
        return src.copy()
    return convnet.merge_groups(src, fresh, ["backbone"])[0]


# -- interaction ------------------------------------------------------------

def _execute(scene, cmd, task):
    if task == "suction":
        return binsim.execute_suction(scene, cmd)
    return binsim.execute_grasp(scene, cmd)


def _training_crop(x: np.ndarray, pixel, radius: int):
    """Window of ``x`` whose forward pass reproduces the logit at ``pixel`` exactly."""
    _, H, W = x.shape
    r, c = pixel
    r0, r1 = max(0, r - radius), min(H, r + radius + 1)
    c0, c1 = max(0, c - radius), min(W, c + radius + 1)
    return x[:, r0:r1, c0:c1], (r - r0, c - c0)


def transition_input(t: Transition, stats: NormStats, task: str, mode: str = "bilinear"):
    """Network input (in the executed plane's frame) and the executed pixel in it."""
    x = normalize(t.heightmap, stats)
    if task == "grasp":
        x = aff.rotate_input(x, t.action.angle_index, mode)[0]
    return x, t.action.frame_pixel


def replay_step(params: NetParams, transitions, stats: NormStats, task: str, lr: float,
                momentum: float, velocity, mode: str = "bilinear"):
    """One SGD step on single-pixel BCE over a batch of transitions.

    Each sample is cut down to the receptive field of its executed pixel,
    which leaves that pixel's logit and all parameter gradients unchanged.

    Returns ``(params, velocity, loss, predictions)``.
    """
    n = len(transitions)
    groups: dict[tuple, list] = {}
    for j, t in enumerate(transitions):
        x, pix = transition_input(t, stats, task, mode)
        crop, (r, c) = _training_crop(x, pix, convnet.RECEPTIVE_RADIUS)
        groups.setdefault(crop.shape, []).append((j, crop, r, c, t.label))
    grads, loss, preds = None, 0.0, np.zeros(n)
    for shape, items in groups.items():
        xb = np.stack([it[1] for it in items])
        target = np.zeros((len(items),) + shape[1:], dtype=np.float32)
        mask = np.zeros(target.shape, dtype=bool)
        for b, (_, _, r, c, label) in enumerate(items):
            target[b, r, c] = label
            mask[b, r, c] = True
        logits, cache = convnet.forward(params, xb)
        rep = convnet.bce_loss_masked(logits, target, mask)
        share = len(items) / n
        g = convnet.backward(params, cache, rep.grad_logits * np.float32(share))
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        loss += rep.loss * share
        for b, (j, _, r, c, _) in enumerate(items):
            preds[j] = aff.probability(logits[b, r, c])
    params, velocity = convnet.sgd_step(params, grads, lr, momentum, velocity)
    return params, velocity, loss, preds


def _training_scene(env: Env, rng) -> binsim.Scene:
    """A fresh random arrangement; seeds that overfill the bin are skipped.

    The canonical evaluation seed never appears during training.
    """
    while True:
        s = int(rng.integers(2 ** 31))
        if s == CANONICAL_SEED:
            continue
        try:
            return env.reset(s)
        except BinOverfull:
            continue


def train_affordance(env: Env, params: NetParams, cfg: RunConfig, stats: NormStats,
                     seed: int | None = None):
    """Trial-and-error fine-tuning. Returns ``(params, curve)``."""
    seed = cfg.seeds[0] if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    curve = Curve(window=cfg.window)
    if cfg.attempts == 0:
        return params, curve
    buf = ReplayBuffer(cfg.replay_capacity, cfg.alpha)
    velocity = None
    scene_rng = np.random.default_rng([seed, 2])
    scene = _training_scene(env, scene_rng)
    since_reset = 0
    for attempt in range(cfg.attempts):
        if binsim.remaining_objects(scene) == 0 or since_reset >= cfg.reset_every:
            scene = _training_scene(env, scene_rng)
            since_reset = 0
        hm = binsim.render(scene)
        x = normalize(hm, stats)
        amap = aff.predict(params, x, cfg.task, cfg.rotation_mode)
        action = aff.select_action(amap, cfg.exploration, rng, tau=cfg.tau)
        outcome, scene = _execute(scene, aff.action_to_command(action, hm, cfg.task), cfg.task)
        since_reset += 1
        buf.push(Transition(hm, action, outcome.label))
        idx = buf.sample(min(cfg.batch_size, len(buf)) if cfg.batch_size else 1, rng)
        batch = [buf[i] for i in idx]
        params, velocity, loss, preds = replay_step(params, batch, stats, cfg.task, cfg.lr,
                                                    cfg.momentum, velocity, cfg.rotation_mode)
        for i, t, p in zip(idx, batch, preds):
            buf.update_priority(i, p - t.label)
        curve.add(outcome.label, loss)
    return params, curve


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    successes: int
    attempts: int
    log: list = field(default_factory=list)  # (attempt, pixel, angle_index, label, reason)

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


def _exclusion(mask: np.ndarray, failed, task: str, radius: int = 2) -> np.ndarray:
    """Mask out entries near actions that already failed on the current scene."""
    K, H, W = mask.shape
    off = binsim.disk_offsets(radius)
    for k, (r, c) in failed:
        ks = [k] if task == "suction" else [k, (k + K // 2) % K]
        rr, cc = off[:, 0] + r, off[:, 1] + c
        ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        for kk in ks:
            mask[kk, rr[ok], cc[ok]] = False
    return mask


def oracle_action(scene: binsim.Scene, task: str):
    """A ground-truth-successful command for the current scene, or None."""
    cfg = scene.config
    if task == "suction":
        ok = binsim.suction_success_map(scene)
        if not ok.any():
            return None
        r, c = np.argwhere(ok)[0]
        return binsim.SuctionCommand(((c + 0.5) * cfg.pixel_size + cfg.origin_xy[0],
                                      (r + 0.5) * cfg.pixel_size + cfg.origin_xy[1],
                                      float(scene.heightfield[r, c])))
    for idx in range(len(scene.instances) - 1, -1, -1):
        rows, cols = np.nonzero(scene.top_id == idx)
        if rows.size == 0:
            continue
        order = np.argsort((rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2, kind="stable")
        for j in order:
            r, c = rows[j], cols[j]
            p = ((c + 0.5) * cfg.pixel_size + cfg.origin_xy[0],
                 (r + 0.5) * cfg.pixel_size + cfg.origin_xy[1], float(scene.heightfield[r, c]))
            for k in range(aff.N_ANGLES // 2):
                if binsim.grasp_check(scene, p, k * aff.ANGLE_STEP) == "ok":
                    return binsim.GraspCommand(p, k * aff.ANGLE_STEP)
    return None


def run_policy(env: Env, params: NetParams | None, task: str, stats: NormStats | None,
               scene: binsim.Scene, max_attempts: int, mode: str = "bilinear",
               policy: str = "greedy", rng=None, next_scene=None, reset_every: int | None = None,
               tau: float = 0.05):
    """Execute a fixed policy (no learning). Returns an EvalResult.

    ``policy`` is "greedy" (argmax of the model), "boltzmann" (the training
    exploration rule at temperature ``tau``) or "oracle" (ground truth).
    Without ``next_scene`` (a callable returning a fresh Scene) the run
    stops once the bin is empty.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    res = EvalResult(0, 0)
    failed: list = []
    since_reset = 0
    for attempt in range(max_attempts):
        if binsim.remaining_objects(scene) == 0 or (reset_every and since_reset >= reset_every):
            if next_scene is None:
                break
            scene = next_scene()
            failed, since_reset = [], 0
        if policy == "oracle":
            cmd = oracle_action(scene, task)
            if cmd is None:
                cmd = (binsim.SuctionCommand((0.0, 0.0, 0.0)) if task == "suction"
                       else binsim.GraspCommand((0.0, 0.0, 0.0), 0.0))
            pixel, k = binsim.world_to_pixel(scene.config, cmd.p[0], cmd.p[1]), 0
        else:
            hm = binsim.render(scene)
            amap = aff.predict(params, normalize(hm, stats), task, mode)
            valid = _exclusion(amap.valid.copy(), failed, task)
            if not valid.any():
                valid = amap.valid
            action = aff.select_action(amap, policy, rng, valid, tau)
            cmd = aff.action_to_command(action, hm, task)
            pixel, k = action.pixel, action.angle_index
        outcome, scene = _execute(scene, cmd, task)
        since_reset += 1
        res.attempts += 1
        res.successes += outcome.label
        res.log.append((attempt, pixel, k, outcome.label, outcome.reason))
        if outcome.label:
            failed = []
        elif policy != "oracle":
            failed.append((action.angle_index, action.frame_pixel))
    return res


def evaluate(env: Env, params: NetParams | None, cfg: RunConfig, stats: NormStats | None,
             policy: str = "greedy", seed: int = CANONICAL_SEED) -> EvalResult:
    """One test run from the canonical arrangement with gradients disabled."""
    scene = env.reset(seed)
    if binsim.remaining_objects(scene) == 0:
        raise EmptyScene("canonical arrangement has no objects")
    cap = cfg.eval_attempts or EVAL_ATTEMPTS.get(env.object_set, 25)
    return run_policy(env, params, cfg.task, stats, scene, cap, cfg.rotation_mode, policy)


def evaluate_runs(env: Env, params, cfg: RunConfig, stats) -> float:
    """Pooled success rate over the configured canonical arrangements."""
    succ = att = 0
    for s in cfg.eval_seeds:
        r = evaluate(env, params, cfg, stats, seed=s)
        succ += r.successes
        att += r.attempts
    return succ / att


def zero_shot_rate(env: Env, params: NetParams, task: str, stats: NormStats, attempts: int,
                   seed: int, mode: str = "bilinear", reset_every: int = 30,
                   policy: str = "boltzmann", tau: float = 0.05) -> float:
    """Success of an un-tuned model over ``attempts`` picks, without learning.

    By default actions follow the attempt-0 exploration rule of
    :func:`train_affordance`. Scene seeds depend only on ``seed``, so two
    models evaluated with the same seed face the same initial arrangements.
    """
    scene_rng = np.random.default_rng([seed, 3])
    res = run_policy(env, params, task, stats, _training_scene(env, scene_rng), attempts, mode,
                     policy, np.random.default_rng([seed, 4]),
                     lambda: _training_scene(env, scene_rng), reset_every, tau)
    return res.success_rate


# -- statistics -------------------------------------------------------------

def mean_ci95(values) -> tuple[float, float, float]:
    """Mean and two-sided 95% t-interval; the interval collapses to the mean for n = 1."""
    from scipy import stats as st

    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if len(v) < 2:
        return m, m, m
    half = float(st.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))
    return m, m - half, m + half


# -- benchmark --------------------------------------------------------------

@dataclass
class BenchConfig:
    """A grid of (vision task x transfer strategy x affordance task) runs.

    The vision task "random" stands for no pre-training; it yields a single
    row with strategy "random" regardless of ``strategies``.
    """

    vision_tasks: tuple[str, ...] = ("random",) + VISION_TASKS
    strategies: tuple[str, ...] = ("full",)
    tasks: tuple[str, ...] = AFFORDANCE_TASKS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dataset_scenes: int = 100
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(steps=1500, lr=1e-2))
    attempts: dict = field(default_factory=lambda: {"suction": 600, "grasp": 1500})
    run: RunConfig = field(default_factory=RunConfig)
    jobs: int = 1

    def __post_init__(self):
        bad = set(self.vision_tasks) - {"random", *VISION_TASKS}
        if bad or not self.vision_tasks or not self.tasks or not self.seeds:
            raise ValueError(f"empty or unknown grid entries: {sorted(bad)}")
        if set(self.strategies) - set(STRATEGIES) or set(self.tasks) - set(AFFORDANCE_TASKS):
            raise ValueError("unknown strategy or affordance task")

    def grid(self):
        """(vision_task, strategy, task) triples in report order."""
        rows = []
        for v in self.vision_tasks:
            strategies = ("random",) if v == "random" else tuple(s for s in self.strategies if s != "random")
            for s in strategies:
                for t in self.tasks:
                    rows.append((v, s, t))
        return rows


@dataclass
class JobResult:
    vision_task: str
    strategy: str
    task: str
    seed: int
    curve: Curve
    rates: dict  # object set -> evaluation success rate


def dataset_seed(seed: int) -> int:
    return 10_000 + 1_000 * seed


def run_dataset(seed: int, n_scenes: int, object_set: str = "train") -> VisionDataset:
    """The pre-training dataset of run ``seed``.

    Scenes use consecutive seeds from :func:`dataset_seed`; if that block
    holds an arrangement that overfills the bin, the whole block moves up by
    1e6 until it places.
    """
    for shift in range(100):
        try:
            return build_dataset(object_set, n_scenes, dataset_seed(seed) + 1_000_000 * shift)
        except BinOverfull:
            log.info("dataset block of seed %d overfills at shift %d", seed, shift)
    raise BinOverfull(f"no placeable dataset block for seed {seed}")


def _pretrain_job(args):
    vision_task, seed, cfg = args
    ds = run_dataset(seed, cfg.dataset_scenes)
    if vision_task == "random":
        return None, ds.norm_stats
    params, _ = pretrain_vision(vision_task, ds, cfg.pretrain.steps, seed, cfg.pretrain)
    return params, ds.norm_stats


def _train_job(args) -> JobResult:
    (vision_task, strategy, task, seed), source, stats, cfg = args
    run = replace(cfg.run, task=task, seeds=(seed,), attempts=cfg.attempts[task])
    params = init_affordance(TransferStrategy(strategy, source), seed)
    params, curve = train_affordance(Env.make("train"), params, run, stats, seed)
    rates = {}
    for object_set in ("train", "test"):
        rates[object_set] = evaluate_runs(Env.make(object_set), params, replace(run, object_set=object_set), stats)
    log.info("%s/%s/%s seed %d: final %.3f, seen %.3f, unseen %.3f", vision_task, strategy, task,
             seed, curve.final_rate, rates["train"], rates["test"])
    return JobResult(vision_task, strategy, task, seed, curve, rates)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items, chunksize=1)


def benchmark(cfg: BenchConfig) -> list[JobResult]:
    """Run every grid cell for every seed: pretrain, transfer, fine-tune, evaluate.

    Jobs are independent and may run in parallel; results come back in grid
    order, so the report does not depend on ``jobs``.
    """
    pre_keys = [(v, s) for v in dict.fromkeys(v for v, _, _ in cfg.grid()) for s in cfg.seeds]
    pre = dict(zip(pre_keys, _map(_pretrain_job, [(v, s, cfg) for v, s in pre_keys], cfg.jobs)))
    jobs = []
    for v, strat, task in cfg.grid():
        for s in cfg.seeds:
            source, stats = pre[(v, s)]
            jobs.append(((v, strat, task, s), source, stats, cfg))
    return _map(_train_job, jobs, cfg.jobs)


REPORT_COLUMNS = ("vision_task", "strategy", "affordance_task", "object_set", "mean",
                  "ci95_low", "ci95_high", "n_seeds")


def report_rows(results: list[JobResult]) -> list[dict]:
    cells: dict[tuple, list] = {}
    for r in results:
        for object_set, rate in r.rates.items():
            cells.setdefault((r.vision_task, r.strategy, r.task, object_set), []).append(rate)
    rows = []
    for (v, s, t, o), vals in cells.items():
        m, lo, hi = mean_ci95(vals)
        rows.append(dict(vision_task=v, strategy=s, affordance_task=t, object_set=o,
                         mean=m, ci95_low=lo, ci95_high=hi, n_seeds=len(vals)))
    return rows


def final_rate_rows(results: list[JobResult]) -> list[dict]:
    return [dict(vision_task=r.vision_task, strategy=r.strategy, affordance_task=r.task,
                 seed=r.seed, attempts=len(r.curve), final_running_rate=r.curve.final_rate)
            for r in results]


def write_csv(rows: list[dict], path, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def format_table(rows: list[dict], object_set: str = "test", strategy: str = "full") -> str:
    """Success rates laid out with vision tasks as rows and primitives as columns."""
    names = {"random": "Random", "center": "Object center", "corner": "Corner detection",
             "edge": "Edge detection", "foreground": "Foreground segmentation",
             "flat_surface": "Normal estimation"}
    pick = {}
    for r in rows:
        if r["object_set"] == object_set and r["strategy"] in (strategy, "random"):
            pick[(r["vision_task"], r["affordance_task"])] = r
    tasks = [t for t in AFFORDANCE_TASKS if any(k[1] == t for k in pick)]
    order = [v for v in ("random",) + VISION_TASKS if any(k[0] == v for k in pick)]
    title = "unseen" if object_set == "test" else "seen"
    lines = [f"Success rate on {title} objects ({strategy} transfer; mean [95% CI])",
             f"{'Pre-training task':<26}" + "".join(f"{t:>24}" for t in tasks)]
    for v in order:
        cells = []
        for t in tasks:
            r = pick.get((v, t))
            cells.append(f"{r['mean']:.2f} [{r['ci95_low']:.2f}, {r['ci95_high']:.2f}]" if r else "-")
        lines.append(f"{names.get(v, v):<26}" + "".join(f"{c:>24}" for c in cells))
    return "\n".join(lines) + "\n"


def write_report(results: list[JobResult], out_dir) -> list[dict]:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    for r in results:
        r.curve.write_csv(out / "curves" / f"{r.vision_task}_{r.strategy}_{r.task}_seed{r.seed}.csv")
    rows = report_rows(results)
    write_csv(rows, out / "report.csv", REPORT_COLUMNS)
    write_csv(final_rate_rows(results), out / "final_rates.csv",
              ("vision_task", "strategy", "affordance_task", "seed", "attempts", "final_running_rate"))
    text = format_table(rows, "test") + "\n" + format_table(rows, "train")
    (out / "report.txt").write_text(text)
    return rows
