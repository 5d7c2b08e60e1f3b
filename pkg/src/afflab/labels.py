"""Ground-truth label maps for the passive vision tasks, and offline datasets.

All labels come from classical operators applied to simulator renders:
Canny edges and Harris corners on luminance, disks at footprint centroids,
depth-threshold foreground, and upward-facing normals for flat surfaces.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import binsim
from . import heightmap as hmap
from .errors import DataError, ImageTooSmall
from .heightmap import Heightmap, NormStats

TASKS = ("edge", "corner", "center", "foreground", "flat_surface")
LABEL_MAGIC = b"ALB1"


@dataclass
class LabelMap:
    task: str
    labels: np.ndarray  # (H, W) uint8 in {0, 1}


@dataclass
class LabelParams:
    sigma: float = 1.0
    canny_lo: float = 0.1
    canny_hi: float = 0.2
    harris_k: float = 0.05
    harris_thresh: float = 0.01
    radius_px: int = 3
    tau_fg: float = 0.005
    theta_flat_deg: float = 15.0


@dataclass
class VisionDataset:
    entries: list[tuple[Heightmap, dict[str, LabelMap]]]
    norm_stats: NormStats
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def targets(self, task: str) -> np.ndarray:
        return np.stack([labels[task].labels for _, labels in self.entries])


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(3 * sigma + 0.5))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(gx, gy): derivatives along columns and rows, replicated borders."""
    p = np.pad(img, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy


def _check_size(img):
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ImageTooSmall(f"need at least 3x3 pixels, got {img.shape}")


# neighbor offsets (dr, dc) along the quantized gradient direction
_NMS_DIRS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def canny_edges(gray, sigma: float = 1.0, lo: float = 0.1, hi: float = 0.2) -> LabelMap:
    """Canny edges; ``lo``/``hi`` are fractions of the maximum gradient magnitude.

    Non-maximum suppression keeps a pixel when its magnitude is >= the
    neighbor behind it and > the neighbor ahead of it, so a symmetric ridge
    yields a single pixel.
    """
    if not 0 <= lo <= hi:
        raise ValueError("need 0 <= lo <= hi")
    g = np.asarray(gray, dtype=np.float64)
    _check_size(g)
    gx, gy = sobel(_smooth(g, sigma))
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return LabelMap("edge", np.zeros(g.shape, dtype=np.uint8))

    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = np.where((ang < 22.5) | (ang >= 157.5), 0,
                      np.where(ang < 67.5, 1, np.where(ang < 112.5, 2, 3)))
    padded = np.pad(mag, 1)
    H, W = g.shape
    keep = np.zeros(g.shape, dtype=bool)
    for s, (dr, dc) in _NMS_DIRS.items():
        ahead = padded[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]
        behind = padded[1 - dr:1 - dr + H, 1 - dc:1 - dc + W]
        keep |= (sector == s) & (mag >= behind) & (mag > ahead)
    keep &= mag > 0

    weak = keep & (mag >= lo * peak)
    strong = keep & (mag >= hi * peak)
    comp, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    good = np.zeros(n + 1, dtype=bool)
    good[np.unique(comp[strong])] = True
    good[0] = False
    return LabelMap("edge", good[comp].astype(np.uint8))


def harris_response(gray, sigma: float = 1.0, k: float = 0.05) -> np.ndarray:
    g = np.asarray(gray, dtype=np.float64)
    ix, iy = sobel(g)
    sxx = _smooth(ix * ix, sigma)
    syy = _smooth(iy * iy, sigma)
    sxy = _smooth(ix * iy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris_corners(gray, sigma: float = 1.0, k: float = 0.05, thresh: float = 0.01) -> LabelMap:
    if not 0 < k < 0.25 or thresh <= 0:
        raise ValueError("need 0 < k < 0.25 and thresh > 0")
    g = np.asarray(gray, dtype=np.float64)
    _check_size(g)
    r = harris_response(g, sigma, k)
    peak = r.max()
    if peak <= 0:
        return LabelMap("corner", np.zeros(g.shape, dtype=np.uint8))
    local_max = r >= ndimage.maximum_filter(r, size=3, mode="constant", cval=-np.inf)
    return LabelMap("corner", (local_max & (r > thresh * peak)).astype(np.uint8))


def object_centers(scene: binsim.Scene, radius_px: int = 3) -> LabelMap:
    if radius_px < 1:
        raise ValueError("radius_px must be >= 1")
    cfg = scene.config
    out = np.zeros((cfg.H, cfg.W), dtype=np.uint8)
    offsets = binsim.disk_offsets(radius_px)
    for inst in scene.instances:
        r, c = binsim.world_to_pixel(cfg, inst.x, inst.y)
        rr, cc = offsets[:, 0] + r, offsets[:, 1] + c
        ok = (rr >= 0) & (rr < cfg.H) & (cc >= 0) & (cc < cfg.W)
        out[rr[ok], cc[ok]] = 1
    return LabelMap("center", out)


def foreground_mask(hm: Heightmap, tau_fg: float = 0.005) -> LabelMap:
    if tau_fg <= 0:
        raise ValueError("tau_fg must be > 0")
    return LabelMap("foreground", (hm.depth > tau_fg).astype(np.uint8))


def flat_surface(normals: np.ndarray, theta_flat_deg: float, foreground: np.ndarray) -> LabelMap:
    if not 0 < theta_flat_deg < 90:
        raise ValueError("theta_flat must lie in (0, 90) degrees")
    upright = normals[..., 2] >= math.cos(math.radians(theta_flat_deg))
    return LabelMap("flat_surface", (upright & (np.asarray(foreground) > 0)).astype(np.uint8))


_RING = np.ones((3, 3), dtype=bool)


def label_scene(scene: binsim.Scene, hm: Heightmap, params: LabelParams) -> dict[str, LabelMap]:
    gray = luminance(hm.rgb)
    fg = foreground_mask(hm, params.tau_fg)
    # Smoothing lets Canny fire inside floor gaps only 2-3 px wide, and Harris
    # fires on corners whose edges fell under the hysteresis threshold; both
    # are clipped so edges hug objects and corners sit on edges.
    edge = canny_edges(gray, params.sigma, params.canny_lo, params.canny_hi).labels
    edge &= ndimage.binary_dilation(fg.labels, _RING).astype(np.uint8)
    corner = harris_corners(gray, params.sigma, params.harris_k, params.harris_thresh).labels
    corner &= ndimage.binary_dilation(edge, _RING, iterations=2).astype(np.uint8)
    return {
        "edge": LabelMap("edge", edge),
        "corner": LabelMap("corner", corner),
        "center": object_centers(scene, params.radius_px),
        "foreground": fg,
        "flat_surface": flat_surface(binsim.surface_normals(hm), params.theta_flat_deg, fg.labels),
    }


def build_dataset(object_set, n_scenes: int, seed: int, label_params: LabelParams | None = None,
                  sim_config: binsim.SimConfig | None = None,
                  n_instances: int | None = None) -> VisionDataset:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    params = label_params or LabelParams()
    cfg = sim_config or binsim.SimConfig()
    n = cfg.n_instances if n_instances is None else n_instances
    if not object_set:
        n = 0
    entries = []
    for i in range(n_scenes):
        scene = binsim.reset(object_set, n, seed + i, cfg)
        hm = binsim.render(scene)
        entries.append((hm, label_scene(scene, hm, params)))
    stats = hmap.compute_norm_stats(hm for hm, _ in entries)
    return VisionDataset(entries, stats, {"seed": seed, "n_scenes": n_scenes})


# -- on-disk format ---------------------------------------------------------

def dumps_label(lm: LabelMap) -> bytes:
    H, W = lm.labels.shape
    token = lm.task.encode()
    bits = np.packbits(lm.labels.astype(bool), axis=1)
    return LABEL_MAGIC + struct.pack("<B", len(token)) + token + struct.pack("<II", H, W) + bits.tobytes()


def loads_label(buf: bytes) -> LabelMap:
    if buf[:4] != LABEL_MAGIC:
        raise DataError("not a label container")
    n = buf[4]
    task = buf[5:5 + n].decode()
    H, W = struct.unpack_from("<II", buf, 5 + n)
    off = 5 + n + 8
    row_bytes = (W + 7) // 8
    if len(buf) != off + H * row_bytes:
        raise DataError("truncated label container")
    bits = np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(H, row_bytes)
    return LabelMap(task, np.unpackbits(bits, axis=1, count=W).astype(np.uint8))


def save_dataset(ds: VisionDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (hm, labels) in enumerate(ds.entries):
        hmap.save(hm, d / f"scene_{i:05d}.ahm")
        for task in TASKS:
            (d / f"scene_{i:05d}.{task}.alb").write_bytes(dumps_label(labels[task]))
    (d / "norm_stats.json").write_text(json.dumps(ds.norm_stats.to_dict(), indent=2) + "\n")


def load_dataset(directory) -> VisionDataset:
    d = Path(directory)
    stats_file = d / "norm_stats.json"
    if not stats_file.exists():
        raise DataError(f"{d} is not a dataset directory")
    entries = []
    for path in sorted(d.glob("scene_*.ahm")):
        stem = path.name[:-len(".ahm")]
        labels = {t: loads_label((d / f"{stem}.{t}.alb").read_bytes()) for t in TASKS}
        entries.append((hmap.load(path), labels))
    if not entries:
        raise DataError(f"{d} contains no scenes")
    stats = NormStats.from_dict(json.loads(stats_file.read_text()))
    return VisionDataset(entries, stats)
