"""Pixel-wise affordances from network logits, and action selection.

Grasp orientation is handled by rotating the *input*: plane ``k`` holds the
network's prediction for the heightmap rotated by ``-k * 22.5`` degrees, in
which frame a horizontal grasp corresponds to closing direction
``theta = k * 22.5`` degrees in the world. Predictions stay in their rotated
frames; only the selected pixel is mapped back.

Pixel coordinates are ``(row, col)`` with rows along world y. Rotations are
about the image center in the ``(x=col, y=row)`` frame, counter-clockwise
for positive angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import convnet
from .binsim import GraspCommand, SuctionCommand
from .errors import InvalidTarget, NoValidAction
from .heightmap import Heightmap

N_ANGLES = 16
ANGLE_STEP = 2 * math.pi / N_ANGLES
_QUARTER = N_ANGLES // 4
_P_LO = np.finfo(np.float64).tiny
_P_HI = np.nextafter(1.0, 0.0)


@dataclass
class AffordanceMap:
    task: str
    values: np.ndarray  # (K, H, W) float64 in (0, 1); K = 1 (suction) or 16 (grasp)
    valid: np.ndarray  # (K, H, W) bool
    angle_step: float = ANGLE_STEP

    @property
    def K(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Action:
    pixel: tuple[int, int]  # original frame
    angle_index: int
    value: float
    frame_pixel: tuple[int, int]  # pixel in the rotated frame of plane angle_index


def probability(logits) -> np.ndarray:
    """Sigmoid in float64, kept strictly inside (0, 1)."""
    return np.clip(convnet.sigmoid(np.asarray(logits, dtype=np.float64)), _P_LO, _P_HI)


# -- rotation ---------------------------------------------------------------

def _source_offsets(dx, dy, angle: float):
    """Offsets from the center of the source point for output offsets (dx, dy)."""
    c, s = math.cos(angle), math.sin(angle)
    return c * dx - s * dy, s * dx + c * dy


def _sample_coords(H: int, W: int, angle: float):
    """Source (x, y) for each output pixel when the image is rotated by -angle."""
    cx, cy = (W - 1) / 2, (H - 1) / 2
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ox, oy = _source_offsets(xx - cx, yy - cy, angle)
    return cx + ox, cy + oy


def _nearest(ox, oy, cx, cy):
    """Round source offsets to pixel indices.

    Exact half-way ties are broken by a rule that commutes with quarter turns
    about the center: an x tie goes toward the sign of y, a y tie toward the
    sign of -x. Plain round-half-even would not, and 45 degree rotations of
    even-sized images hit such ties.
    """
    sx, sy = np.asarray(cx + ox, dtype=np.float64), np.asarray(cy + oy, dtype=np.float64)
    ix, iy = np.rint(sx), np.rint(sy)
    tx, ty = sx - np.floor(sx) == 0.5, sy - np.floor(sy) == 0.5
    ix = np.where(tx & (oy != 0), np.floor(sx) + (oy > 0), ix)
    iy = np.where(ty & (ox != 0), np.floor(sy) + (ox < 0), iy)
    return ix.astype(np.int64), iy.astype(np.int64)


def _resample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, mode: str):
    C, H, W = img.shape
    if mode == "nearest":
        cx, cy = (W - 1) / 2, (H - 1) / 2
        ix, iy = _nearest(sx - cx, sy - cy, cx, cy)
        valid = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        out = img[:, np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1)]
    elif mode == "bilinear":
        tol = 1e-9
        valid = (sx >= -tol) & (sx <= W - 1 + tol) & (sy >= -tol) & (sy <= H - 1 + tol)
        sx, sy = np.clip(sx, 0, W - 1), np.clip(sy, 0, H - 1)
        x0, y0 = np.floor(sx).astype(np.int64), np.floor(sy).astype(np.int64)
        fx, fy = sx - x0, sy - y0
        x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
        out = (img[:, y0, x0] * ((1 - fx) * (1 - fy)) + img[:, y0, x1] * (fx * (1 - fy))
               + img[:, y1, x0] * ((1 - fx) * fy) + img[:, y1, x1] * (fx * fy))
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    out = np.where(valid, out, 0).astype(img.dtype)
    return out, valid


def rotate_input(x: np.ndarray, k: int, mode: str = "bilinear"):
    """Rotate a (C, H, W) image by ``-k * 22.5`` degrees about its center.

    Quarter turns are applied as exact lattice rotations, so planes ``k`` and
    ``k + 4`` of a square image differ by a pure pixel permutation.

    Returns:
        (rotated, valid) where ``valid`` marks pixels whose source lies
        inside the original image.
    """
    C, H, W = x.shape
    k %= N_ANGLES
    small, quarters = k % _QUARTER, k // _QUARTER
    if H != W:
        small, quarters = k, 0
    if small:
        sx, sy = _sample_coords(H, W, small * ANGLE_STEP)
        out, valid = _resample(x, sx, sy, mode)
    else:
        out, valid = x.copy(), np.ones((H, W), dtype=bool)
    if quarters:
        out = np.ascontiguousarray(np.rot90(out, quarters, axes=(1, 2)))
        valid = np.ascontiguousarray(np.rot90(valid, quarters))
    return out, valid


def frame_to_pixel(frame_pixel, k: int, shape) -> tuple[int, int]:
    """Map a pixel of rotated plane ``k`` back to the original image frame."""
    H, W = shape
    k %= N_ANGLES
    r, c = int(frame_pixel[0]), int(frame_pixel[1])
    small, quarters = k % _QUARTER, k // _QUARTER
    if H != W:
        small, quarters = k, 0
    for _ in range(quarters):
        # inverse of one np.rot90 step: out[i, j] = in[j, W-1-i]
        r, c = c, W - 1 - r
    if small:
        cx, cy = (W - 1) / 2, (H - 1) / 2
        ox, oy = _source_offsets(c - cx, r - cy, small * ANGLE_STEP)
        ix, iy = _nearest(ox, oy, cx, cy)
        r, c = int(np.clip(iy, 0, H - 1)), int(np.clip(ix, 0, W - 1))
    return r, c


# -- prediction -------------------------------------------------------------

def predict_suction(params: convnet.NetParams, x: np.ndarray) -> AffordanceMap:
    logits, _ = convnet.forward(params, x, keep_cache=False)
    values = probability(logits)[None]
    return AffordanceMap("suction", values, np.ones(values.shape, dtype=bool))


def rotated_stack(x: np.ndarray, mode: str = "bilinear"):
    planes, valid = zip(*(rotate_input(x, k, mode) for k in range(N_ANGLES)))
    return np.stack(planes), np.stack(valid)


def predict_grasp(params: convnet.NetParams, x: np.ndarray, mode: str = "bilinear") -> AffordanceMap:
    batch, valid = rotated_stack(np.asarray(x), mode)
    logits, _ = convnet.forward(params, batch, keep_cache=False)
    values = np.where(valid, probability(logits), 0.0)
    return AffordanceMap("grasp", values, valid)


def predict(params, x, task: str, mode: str = "bilinear") -> AffordanceMap:
    if task == "suction":
        return predict_suction(params, x)
    if task == "grasp":
        return predict_grasp(params, x, mode)
    raise ValueError(f"unknown task {task!r}")


# -- selection --------------------------------------------------------------

def select_action(aff: AffordanceMap, mode: str = "greedy", rng=None, valid=None,
                  tau: float = 0.05) -> Action:
    """Pick an entry of the affordance map.

    ``mode`` is "greedy" (argmax, ties broken uniformly by ``rng``) or
    "boltzmann" (probability proportional to exp(value / tau)).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ok = aff.valid if valid is None else (np.asarray(valid, dtype=bool) & aff.valid)
    flat_ok = np.flatnonzero(ok)
    if flat_ok.size == 0:
        raise NoValidAction("no valid affordance entries")
    vals = aff.values.reshape(-1)[flat_ok]
    if mode == "greedy":
        best = np.flatnonzero(vals == vals.max())
        pick = flat_ok[best[rng.integers(best.size)] if best.size > 1 else best[0]]
    elif mode == "boltzmann":
        if tau <= 0:
            raise ValueError("tau must be > 0")
        w = np.exp((vals - vals.max()) / tau)
        cdf = np.cumsum(w)
        i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        pick = flat_ok[min(i, flat_ok.size - 1)]
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    k, r, c = np.unravel_index(pick, aff.values.shape)
    k, r, c = int(k), int(r), int(c)
    H, W = aff.values.shape[1:]
    pixel = (r, c) if aff.task == "suction" else frame_to_pixel((r, c), k, (H, W))
    return Action(pixel, k, float(aff.values[k, r, c]), (r, c))


def action_to_command(action: Action, hm: Heightmap, task: str):
    r, c = action.pixel
    H, W = hm.shape
    if not (0 <= r < H and 0 <= c < W) or not hm.valid[r, c]:
        raise InvalidTarget(f"pixel {action.pixel} is not a valid heightmap pixel")
    px = hm.origin_xy[0] + (c + 0.5) * hm.pixel_size
    py = hm.origin_xy[1] + (r + 0.5) * hm.pixel_size
    p = (px, py, float(hm.depth[r, c]))
    if task == "suction":
        return SuctionCommand(p)
    if task == "grasp":
        return GraspCommand(p, action.angle_index * ANGLE_STEP)
    raise ValueError(f"unknown task {task!r}")
