"""Quasi-static 2.5D bin-picking simulator.

Objects are convex prisms with a parametric top surface. They are dropped one
after another and come to rest on the highest support under their footprint
(no toppling, no sliding). The scene is rasterized on the heightmap grid, and
both primitives are judged geometrically on that raster.
"""

from __future__ import annotations

import configparser
import copy
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import BinOverfull, DataError, OutOfWorkspace
from .heightmap import Heightmap

FLOOR_COLOR = (0.30, 0.30, 0.30)
PROFILES = ("flat", "ridge", "dome")


@dataclass(frozen=True)
class ObjectShape:
    id: str
    footprint: np.ndarray  # (N, 2) CCW, centroid at the origin
    height: float
    profile: str = "flat"
    profile_param: float = 0.0  # ridge: slope in degrees; dome: curvature in 1/m
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        fp = np.asarray(self.footprint, dtype=np.float64)
        if fp.ndim != 2 or fp.shape[1] != 2 or len(fp) < 3:
            raise DataError(f"{self.id}: footprint needs >= 3 vertices")
        area = polygon_area(fp)
        if area < 0:
            fp = fp[::-1]
            area = -area
        if area <= 0 or not _is_convex(fp):
            raise DataError(f"{self.id}: footprint must be convex with positive area")
        if self.height <= 0:
            raise DataError(f"{self.id}: height must be > 0")
        if self.profile not in PROFILES:
            raise DataError(f"{self.id}: unknown profile {self.profile!r}")
        fp = fp - polygon_centroid(fp)
        object.__setattr__(self, "footprint", fp)


@dataclass
class SimConfig:
    pixel_size: float = 0.003
    H: int = 64
    W: int = 64
    origin_xy: tuple[float, float] = (0.0, 0.0)
    n_instances: int = 10
    copies: int = 2
    max_stack_height: float = 0.20
    scale_range: tuple[float, float] = (0.8, 1.2)
    color_jitter: float = 0.1
    # suction
    r_cup_px: int = 4
    eps_seal: float = 0.003
    theta_seal_deg: float = 15.0
    # parallel-jaw grasp
    w_open: float = 0.06
    w_min: float = 0.004
    finger_width_px: int = 2
    clearance: float = 0.005

    @property
    def bin_rect(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin_xy
        return (x0, y0, x0 + self.W * self.pixel_size, y0 + self.H * self.pixel_size)


@dataclass
class Instance:
    shape_id: str
    x: float
    y: float
    yaw: float
    scale: float
    color: tuple[float, float, float]
    z0: float = 0.0


@dataclass
class Scene:
    config: SimConfig
    catalog: dict[str, ObjectShape]
    instances: list[Instance] = field(default_factory=list)
    heightfield: np.ndarray | None = None  # (H, W) float32
    top_id: np.ndarray | None = None  # (H, W) int, index into instances or -1
    rng_state: dict | None = None

    @property
    def bin(self):
        return self.config.bin_rect

    def copy(self) -> "Scene":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class SuctionCommand:
    p: tuple[float, float, float]


@dataclass(frozen=True)
class GraspCommand:
    p: tuple[float, float, float]
    theta: float


@dataclass(frozen=True)
class Outcome:
    label: int
    removed_object: str | None
    reason: str


# -- geometry ---------------------------------------------------------------

def polygon_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(v: np.ndarray) -> np.ndarray:
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2
    return np.array([((x + xn) * cross).sum() / (6 * a), ((y + yn) * cross).sum() / (6 * a)])


def _is_convex(v: np.ndarray) -> bool:
    d = np.roll(v, -1, axis=0) - v
    cross = d[:, 0] * np.roll(d[:, 1], -1) - d[:, 1] * np.roll(d[:, 0], -1)
    return bool(np.all(cross >= -1e-15))


def _rot(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def world_polygon(shape: ObjectShape, inst: Instance) -> np.ndarray:
    return (shape.footprint * inst.scale) @ _rot(inst.yaw).T + np.array([inst.x, inst.y])


def points_in_convex(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = np.ones(np.broadcast(px, py).shape, dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    for (ax, ay), (bx, by) in zip(poly, nxt):
        inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
    return inside


def chord(poly: np.ndarray, p: np.ndarray, u: np.ndarray) -> tuple[float, float] | None:
    """Parameter interval [t0, t1] where ``p + t*u`` lies inside the convex polygon."""
    t0, t1 = -math.inf, math.inf
    nxt = np.roll(poly, -1, axis=0)
    for a, b in zip(poly, nxt):
        e = b - a
        # inward normal for CCW polygons
        n = np.array([-e[1], e[0]])
        num = float(np.dot(n, p - a))
        den = float(np.dot(n, u))
        if abs(den) < 1e-15:
            if num < 0:
                return None
            continue
        t = -num / den
        if den > 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
    if t0 > t1:
        return None
    return t0, t1


def pixel_centers(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    cols = cfg.origin_xy[0] + (np.arange(cfg.W) + 0.5) * cfg.pixel_size
    rows = cfg.origin_xy[1] + (np.arange(cfg.H) + 0.5) * cfg.pixel_size
    return np.meshgrid(cols, rows)


def world_to_pixel(cfg: SimConfig, x: float, y: float) -> tuple[int, int]:
    return (int(math.floor((y - cfg.origin_xy[1]) / cfg.pixel_size)),
            int(math.floor((x - cfg.origin_xy[0]) / cfg.pixel_size)))


def _top_surface(shape: ObjectShape, inst: Instance, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Height of the object's top above its base at world points (X, Y)."""
    h = shape.height * inst.scale
    if shape.profile == "flat":
        return np.full(X.shape, h)
    c, s = math.cos(inst.yaw), math.sin(inst.yaw)
    dx, dy = X - inst.x, Y - inst.y
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    if shape.profile == "ridge":
        top = h - math.tan(math.radians(shape.profile_param)) * np.abs(ly)
    else:
        top = h - (shape.profile_param / inst.scale) * (lx ** 2 + ly ** 2)
    return np.maximum(top, 0.25 * h)


def _footprint_mask(cfg, poly, X, Y):
    return points_in_convex(poly, X, Y)


def compose(scene: Scene, settle: bool = True) -> None:
    """Rebuild heightfield and top_id from the instance list (in drop order).

    With ``settle`` each instance's rest height is recomputed from the
    objects below it, so removing a support lets the objects above drop.
    """
    cfg = scene.config
    X, Y = pixel_centers(cfg)
    hf = np.zeros((cfg.H, cfg.W), dtype=np.float64)
    top = np.full((cfg.H, cfg.W), -1, dtype=np.int64)
    for i, inst in enumerate(scene.instances):
        shape = scene.catalog[inst.shape_id]
        mask = _footprint_mask(cfg, world_polygon(shape, inst), X, Y)
        if settle:
            inst.z0 = float(hf[mask].max()) if mask.any() else 0.0
        hf[mask] = inst.z0 + _top_surface(shape, inst, X[mask], Y[mask])
        top[mask] = i
    scene.heightfield = hf.astype(np.float32)
    scene.top_id = top


# -- catalog ----------------------------------------------------------------

def _parse_footprint(text: str) -> np.ndarray:
    tok = text.split()
    if tok[0] == "rect":
        w, h = float(tok[1]), float(tok[2])
        return np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    if tok[0] == "ngon":
        n, r = int(tok[1]), float(tok[2])
        a = 2 * np.pi * np.arange(n) / n
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    pts = [p.split() for p in text.split(";") if p.strip()]
    return np.array([[float(a), float(b)] for a, b in pts])


def parse_catalog(text: str) -> tuple[list[ObjectShape], dict]:
    """Parse a scene spec file into (shapes, scene settings)."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    shapes, settings = [], {}
    for name in cp.sections():
        sec = cp[name]
        if name == "scene":
            settings = dict(sec)
            continue
        if not name.startswith("shape:"):
            raise DataError(f"unknown catalog section [{name}]")
        prof = sec.get("profile", "flat").split()
        shapes.append(ObjectShape(
            id=name.split(":", 1)[1].strip(),
            footprint=_parse_footprint(sec["footprint"]),
            height=sec.getfloat("height"),
            profile=prof[0],
            profile_param=float(prof[1]) if len(prof) > 1 else 0.0,
            color=tuple(float(c) for c in sec.get("color", "0.5 0.5 0.5").split()),
        ))
    if not shapes and "scene" not in cp:
        raise DataError("catalog has no shapes")
    return shapes, settings


def dump_catalog(shapes: list[ObjectShape], settings: dict | None = None) -> str:
    lines = []
    if settings:
        lines.append("[scene]")
        lines += [f"{k} = {v}" for k, v in settings.items()]
        lines.append("")
    for s in shapes:
        verts = "; ".join(f"{float(x)!r} {float(y)!r}" for x, y in s.footprint)
        prof = s.profile if s.profile == "flat" else f"{s.profile} {float(s.profile_param)!r}"
        lines += [f"[shape:{s.id}]", f"footprint = {verts}", f"height = {float(s.height)!r}",
                  f"profile = {prof}", "color = " + " ".join(repr(float(c)) for c in s.color), ""]
    return "\n".join(lines)


def load_catalog(name_or_path: str) -> list[ObjectShape]:
    """Load a shipped catalog ("train" / "test") or a catalog file path."""
    if name_or_path in ("train", "test"):
        text = resources.files("afflab.data").joinpath(f"{name_or_path}.catalog").read_text()
    else:
        text = Path(name_or_path).read_text()
    return parse_catalog(text)[0]


# -- scene lifecycle --------------------------------------------------------

def _instance_shapes(shapes, n, copies, rng) -> list[ObjectShape]:
    n_kinds = -(-n // copies) if n else 0
    replace = n_kinds > len(shapes)
    kinds = rng.choice(len(shapes), size=n_kinds, replace=replace) if n_kinds else []
    return [shapes[k] for k in kinds for _ in range(copies)][:n]


def reset(object_set, n_instances: int, seed: int,
          config: SimConfig | None = None) -> Scene:
    """Drop ``n_instances`` objects from ``object_set`` (shapes or a catalog name)."""
    cfg = config or SimConfig()
    if isinstance(object_set, (str, Path)):
        object_set = load_catalog(object_set)
    if n_instances < 0:
        raise ValueError("n_instances must be >= 0")
    if n_instances and not object_set:
        raise DataError("empty object set")
    rng = np.random.default_rng(seed)
    scene = Scene(cfg, {s.id: s for s in object_set})
    compose(scene)
    xmin, ymin, xmax, ymax = cfg.bin_rect
    X, Y = pixel_centers(cfg)
    for shape in _instance_shapes(list(object_set), n_instances, cfg.copies, rng):
        scale = float(rng.uniform(*cfg.scale_range))
        jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
        color = tuple(float(c) for c in np.clip(np.asarray(shape.color) + jitter, 0.0, 1.0))
        for _ in range(100):
            inst = Instance(shape.id, float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)),
                            float(rng.uniform(0.0, 2 * np.pi)), scale, color)
            poly = world_polygon(shape, inst)
            if not (np.all(poly[:, 0] >= xmin) and np.all(poly[:, 0] <= xmax)
                    and np.all(poly[:, 1] >= ymin) and np.all(poly[:, 1] <= ymax)):
                continue
            mask = points_in_convex(poly, X, Y)
            if not mask.any():
                continue
            inst.z0 = float(scene.heightfield[mask].max())
            if inst.z0 + shape.height * scale > cfg.max_stack_height:
                continue
            scene.instances.append(inst)
            compose(scene, settle=False)
            break
        else:
            raise BinOverfull(f"could not place instance {len(scene.instances) + 1} of {n_instances}")
    scene.rng_state = rng.bit_generator.state
    return scene


def render(scene: Scene) -> Heightmap:
    cfg = scene.config
    palette = np.array([FLOOR_COLOR] + [inst.color for inst in scene.instances], dtype=np.float32)
    rgb = palette[scene.top_id + 1]
    return Heightmap(rgb, scene.heightfield.copy(), tuple(cfg.origin_xy), cfg.pixel_size,
                     np.ones((cfg.H, cfg.W), dtype=bool))


def surface_normals(depth: np.ndarray | Heightmap, pixel_size: float | None = None) -> np.ndarray:
    """Unit normals (H, W, 3) from finite differences of depth; z >= 0 always."""
    if isinstance(depth, Heightmap):
        pixel_size, depth = depth.pixel_size, depth.depth
    d = np.asarray(depth, dtype=np.float64)
    if d.shape[0] > 1 and d.shape[1] > 1:
        gy, gx = np.gradient(d, pixel_size)
    else:
        gy = np.gradient(d, pixel_size, axis=0) if d.shape[0] > 1 else np.zeros_like(d)
        gx = np.gradient(d, pixel_size, axis=1) if d.shape[1] > 1 else np.zeros_like(d)
    n = np.stack([-gx, -gy, np.ones_like(d)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def remaining_objects(scene: Scene) -> int:
    return len(scene.instances)


def _check_workspace(scene: Scene, p) -> tuple[int, int]:
    xmin, ymin, xmax, ymax = scene.bin
    x, y = float(p[0]), float(p[1])
    if not (xmin <= x < xmax and ymin <= y < ymax):
        raise OutOfWorkspace(f"p=({x:.4f}, {y:.4f}) outside bin")
    return world_to_pixel(scene.config, x, y)


def _remove(scene: Scene, idx: int) -> str:
    inst = scene.instances.pop(idx)
    compose(scene, settle=True)
    return inst.shape_id


def disk_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    keep = dy ** 2 + dx ** 2 <= radius ** 2
    return np.stack([dy[keep], dx[keep]], axis=1)


def suction_check(scene: Scene, row: int, col: int, normals: np.ndarray | None = None) -> str:
    """Reason token for a suction at pixel (row, col): "ok", "floor", "edge" or "seal"."""
    cfg = scene.config
    obj = scene.top_id[row, col]
    if obj < 0:
        return "floor"
    off = disk_offsets(cfg.r_cup_px) + (row, col)
    if (off.min(axis=0) < 0).any() or off[:, 0].max() >= cfg.H or off[:, 1].max() >= cfg.W:
        return "edge"
    if np.any(scene.top_id[off[:, 0], off[:, 1]] != obj):
        return "edge"
    disk_depth = scene.heightfield[off[:, 0], off[:, 1]].astype(np.float64)
    if np.max(np.abs(disk_depth - float(scene.heightfield[row, col]))) > cfg.eps_seal:
        return "seal"
    if normals is None:
        normals = surface_normals(scene.heightfield, cfg.pixel_size)
    nz = normals[off[:, 0], off[:, 1], 2]
    if np.any(nz < math.cos(math.radians(cfg.theta_seal_deg))):
        return "seal"
    return "ok"


def execute_suction(scene: Scene, cmd: SuctionCommand) -> tuple[Outcome, Scene]:
    row, col = _check_workspace(scene, cmd.p)
    reason = suction_check(scene, row, col)
    if reason != "ok":
        return Outcome(0, None, reason), scene
    return Outcome(1, _remove(scene, int(scene.top_id[row, col])), "ok"), scene


def grasp_check(scene: Scene, p, theta: float) -> str:
    """Reason token for a grasp at world point p with closing direction theta."""
    cfg = scene.config
    row, col = world_to_pixel(cfg, p[0], p[1])
    obj = int(scene.top_id[row, col])
    if obj < 0:
        return "air"
    inst = scene.instances[obj]
    poly = world_polygon(scene.catalog[inst.shape_id], inst)
    u = np.array([math.cos(theta), math.sin(theta)])
    pxy = np.array([float(p[0]), float(p[1])])
    span = chord(poly, pxy, u)
    if span is None:
        return "air"
    t0, t1 = span
    width = t1 - t0
    if width < cfg.w_min:
        return "too-thin"
    if width > cfg.w_open:
        return "too-wide"
    half = cfg.w_open / 2
    if t1 > half or -t0 > half:
        return "collision"

    # finger sweep rectangles, tested at pixel centers with a small tolerance
    tol = 1e-6 * cfg.pixel_size
    X, Y = pixel_centers(cfg)
    along = (X - pxy[0]) * u[0] + (Y - pxy[1]) * u[1]
    perp = -(X - pxy[0]) * u[1] + (Y - pxy[1]) * u[0]
    in_band = np.abs(perp) <= cfg.finger_width_px * cfg.pixel_size / 2 + tol
    sweep = in_band & (((along >= t1 - tol) & (along <= half + tol))
                       | ((along <= t0 + tol) & (along >= -half - tol)))
    other = (scene.top_id != obj) & (scene.top_id >= 0)
    high = scene.heightfield > float(p[2]) + cfg.clearance
    if np.any(sweep & other & high):
        return "collision"
    return "ok"


def execute_grasp(scene: Scene, cmd: GraspCommand) -> tuple[Outcome, Scene]:
    row, col = _check_workspace(scene, cmd.p)
    reason = grasp_check(scene, cmd.p, cmd.theta)
    if reason != "ok":
        return Outcome(0, None, reason), scene
    return Outcome(1, _remove(scene, int(scene.top_id[row, col])), "ok"), scene


def rotate_scene_90(scene: Scene) -> Scene:
    """Copy of the scene rotated +90 degrees about the bin center (square bins only)."""
    cfg = scene.config
    if cfg.H != cfg.W:
        raise ValueError("90-degree scene rotation needs a square bin")
    xmin, ymin, xmax, ymax = cfg.bin_rect
    cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
    out = scene.copy()
    for inst in out.instances:
        inst.x, inst.y = cx - (inst.y - cy), cy + (inst.x - cx)
        inst.yaw = (inst.yaw + math.pi / 2) % (2 * math.pi)
    compose(out, settle=False)
    return out


def rotate_point_90(cfg: SimConfig, p):
    xmin, ymin, xmax, ymax = cfg.bin_rect
    cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
    return (cx - (p[1] - cy), cy + (p[0] - cx)) + tuple(p[2:])


def suction_success_map(scene: Scene) -> np.ndarray:
    """Boolean (H, W) map of pixels where a suction would succeed right now."""
    cfg = scene.config
    out = np.zeros((cfg.H, cfg.W), dtype=bool)
    normals = surface_normals(scene.heightfield, cfg.pixel_size)
    for r, c in zip(*np.nonzero(scene.top_id >= 0)):
        out[r, c] = suction_check(scene, r, c, normals) == "ok"
    return out
