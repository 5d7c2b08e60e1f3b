"""Orthographic RGB-D heightmaps: projection, normalization and on-disk format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, EmptyDataset

MAGIC = b"AHM1"
STD_FLOOR = 1e-6


@dataclass
class Heightmap:
    """Top-down RGB-D image over a metric grid.

    Pixel ``(row, col)`` covers the square whose lower corner sits at
    ``origin_xy + (col, row) * pixel_size``; rows run along world y.
    """

    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, meters above the workspace plane
    origin_xy: tuple[float, float]
    pixel_size: float
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def copy(self) -> "Heightmap":
        return Heightmap(self.rgb.copy(), self.depth.copy(), tuple(self.origin_xy),
                         self.pixel_size, self.valid.copy())


@dataclass(frozen=True)
class NormStats:
    rgb_mean: tuple[float, float, float]
    rgb_std: tuple[float, float, float]
    depth_mean: float
    depth_std: float

    def to_dict(self) -> dict:
        return {"rgb_mean": list(self.rgb_mean), "rgb_std": list(self.rgb_std),
                "depth_mean": self.depth_mean, "depth_std": self.depth_std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(float(v) for v in d["rgb_mean"]), tuple(float(v) for v in d["rgb_std"]),
                   float(d["depth_mean"]), float(d["depth_std"]))


def grid_shape(extent: tuple[float, float], pixel_size: float) -> tuple[int, int]:
    """(H, W) for a workspace of ``extent = (rows_m, cols_m)`` meters."""
    return (int(round(extent[0] / pixel_size)), int(round(extent[1] / pixel_size)))


def project_to_heightmap(points, origin_xy, pixel_size, H, W):
    """Back-project a colored point cloud upward into a heightmap.

    ``points`` is an (N, 6) array of ``x, y, z, r, g, b``. The topmost point in
    each column wins; equal heights go to the later point. Points with
    non-finite coordinates are dropped.

    Returns:
        (heightmap, n_rejected)
    """
    if pixel_size <= 0 or H < 1 or W < 1:
        raise ValueError("pixel_size must be > 0 and H, W >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 6)
    finite = np.isfinite(pts).all(axis=1)
    n_rejected = int((~finite).sum())
    idx = np.flatnonzero(finite)
    pts = pts[finite]

    row = np.floor((pts[:, 1] - origin_xy[1]) / pixel_size)
    col = np.floor((pts[:, 0] - origin_xy[0]) / pixel_size)
    inside = (row >= 0) & (row < H) & (col >= 0) & (col < W)
    pts, idx = pts[inside], idx[inside]
    flat = row[inside].astype(np.int64) * W + col[inside].astype(np.int64)

    depth = np.zeros(H * W, dtype=np.float32)
    rgb = np.zeros((H * W, 3), dtype=np.float32)
    valid = np.zeros(H * W, dtype=bool)
    if len(flat):
        order = np.lexsort((idx, pts[:, 2], flat))
        flat_sorted = flat[order]
        last = np.r_[flat_sorted[1:] != flat_sorted[:-1], True]
        winners = order[last]
        cells = flat[winners]
        depth[cells] = np.maximum(pts[winners, 2], 0.0)
        rgb[cells] = np.clip(pts[winners, 3:6], 0.0, 1.0)
        valid[cells] = True
    hm = Heightmap(rgb.reshape(H, W, 3), depth.reshape(H, W),
                   (float(origin_xy[0]), float(origin_xy[1])), float(pixel_size),
                   valid.reshape(H, W))
    return hm, n_rejected


def compute_norm_stats(heightmaps: Iterable[Heightmap]) -> NormStats:
    rgb_parts, depth_parts = [], []
    for hm in heightmaps:
        rgb_parts.append(hm.rgb[hm.valid].astype(np.float64))
        depth_parts.append(hm.depth[hm.valid].astype(np.float64))
    if not depth_parts or sum(len(d) for d in depth_parts) == 0:
        raise EmptyDataset("no valid pixels to compute normalization statistics")
    rgb = np.concatenate(rgb_parts)
    depth = np.concatenate(depth_parts)
    rgb_std = np.maximum(rgb.std(axis=0), STD_FLOOR)
    return NormStats(tuple(float(v) for v in rgb.mean(axis=0)),
                     tuple(float(v) for v in rgb_std),
                     float(depth.mean()), float(max(depth.std(), STD_FLOOR)))


def normalize(hm: Heightmap, stats: NormStats) -> np.ndarray:
    """Return the (4, H, W) float32 network input; invalid pixels are zero in every channel."""
    out = np.empty((4,) + hm.shape, dtype=np.float32)
    for c in range(3):
        out[c] = (hm.rgb[..., c] - stats.rgb_mean[c]) / stats.rgb_std[c]
    out[3] = (hm.depth - stats.depth_mean) / stats.depth_std
    out[:, ~hm.valid] = 0.0
    return out


# -- container format -------------------------------------------------------

def dumps(hm: Heightmap) -> bytes:
    H, W = hm.shape
    head = MAGIC + struct.pack("<IIddd", H, W, hm.pixel_size, *hm.origin_xy)
    planes = np.concatenate([np.moveaxis(hm.rgb, -1, 0), hm.depth[None]]).astype("<f4")
    return head + planes.tobytes() + hm.valid.astype(np.uint8).tobytes()


def loads(buf: bytes) -> Heightmap:
    if buf[:4] != MAGIC:
        raise DataError("not a heightmap container")
    H, W, pixel_size, ox, oy = struct.unpack_from("<IIddd", buf, 4)
    off = 4 + struct.calcsize("<IIddd")
    n = H * W
    if len(buf) != off + 16 * n + n:
        raise DataError("truncated heightmap container")
    planes = np.frombuffer(buf, dtype="<f4", count=4 * n, offset=off).reshape(4, H, W)
    valid = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + 16 * n).reshape(H, W)
    return Heightmap(np.ascontiguousarray(np.moveaxis(planes[:3], 0, -1), dtype=np.float32),
                     planes[3].astype(np.float32), (ox, oy), pixel_size, valid.astype(bool))


def save(hm: Heightmap, path) -> None:
    Path(path).write_bytes(dumps(hm))


def load(path) -> Heightmap:
    return loads(Path(path).read_bytes())
