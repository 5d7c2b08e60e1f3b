"""Small fully-convolutional residual network with hand-written backprop.

Seven 'same'-padded, stride-1 convolutions; the first five form the backbone
and the last two the head. Dilated residual layers give a 23x23 receptive
field without any downsampling, so the output logit map has the input's
spatial size.

Activations are kept channels-last. A 3x3 convolution is computed on the
flattened, zero-padded grid: every tap is then a contiguous row-offset slice,
so the forward pass is nine plain matmuls with no im2col copies.
"""

from __future__ import annotations

import hashlib
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CacheMismatch, DivergedGradient, EmptyMask, IncompatibleArchitecture,
                     ShapeMismatch)

# name, c_in, c_out, kernel, dilation, residual, group
LAYERS = (
    ("L1", 4, 16, 3, 1, False, "backbone"),
    ("L2", 16, 16, 3, 2, True, "backbone"),
    ("L3", 16, 16, 3, 4, True, "backbone"),
    ("L4", 16, 32, 3, 1, False, "backbone"),
    ("L5", 32, 32, 3, 2, True, "backbone"),
    ("L6", 32, 16, 3, 1, False, "head"),
    ("L7", 16, 1, 1, 1, False, "head"),
)
GROUPS = ("backbone", "head")
IN_CHANNELS = 4
MIN_SIZE = 8
RECEPTIVE_RADIUS = sum(d * (k - 1) // 2 for _, _, _, k, d, _, _ in LAYERS)
FINGERPRINT = hashlib.sha256(repr(LAYERS).encode()).digest()
WEIGHTS_MAGIC = b"ANP1"
WEIGHTS_VERSION = 1

_tokens = itertools.count(1)


def param_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, cin, cout, k, _, _, _ in LAYERS:
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def group_of(tensor_name: str) -> str:
    layer = tensor_name.split(".")[0]
    for name, *_, group in LAYERS:
        if name == layer:
            return group
    raise KeyError(tensor_name)


@dataclass
class NetParams:
    tensors: dict[str, np.ndarray]
    fingerprint: bytes = FINGERPRINT
    token: int = field(default_factory=lambda: next(_tokens))

    def __post_init__(self):
        expected = param_shapes()
        if set(self.tensors) != set(expected):
            raise IncompatibleArchitecture("tensor names do not match the architecture")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise IncompatibleArchitecture(f"{k}: shape {self.tensors[k].shape} != {shape}")

    def __getitem__(self, key):
        return self.tensors[key]

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in param_shapes() if group is None or group_of(n) == group]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self):
        return self.tensors["L1.weight"].dtype

    def copy(self) -> "NetParams":
        return NetParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "NetParams":
        return NetParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def equal(self, other: "NetParams", names=None) -> bool:
        names = self.names() if names is None else names
        return all(np.array_equal(self.tensors[n], other.tensors[n]) for n in names)


def init_params(seed: int) -> NetParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, cin, cout, k, _, _, _ in LAYERS:
        std = np.sqrt(2.0 / (cin * k * k))
        tensors[f"{name}.weight"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        tensors[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)
    return NetParams(tensors)


# -- convolution primitives -------------------------------------------------

def _taps(w: np.ndarray) -> np.ndarray:
    # (cout, cin, k, k) -> (k*k, cin, cout)
    cout, cin, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k, cin, cout)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, d: int):
    """Same-padded dilated convolution. Returns (y, padded_flat_input)."""
    N, H, W, C = x.shape
    cout, _, k, _ = w.shape
    if k == 1:
        flat = x.reshape(-1, C)
        return (flat @ w.reshape(cout, C).T + b).reshape(N, H, W, cout), flat
    Hp, Wp = H + 2 * d, W + 2 * d
    xp = np.zeros((N, Hp, Wp, C), dtype=x.dtype)
    xp[:, d:d + H, d:d + W] = x
    flat = xp.reshape(-1, C)
    M = N * Hp * Wp
    L = M - 2 * d * Wp - 2 * d
    out = np.zeros((M, cout), dtype=x.dtype)
    acc = out[:L]
    for t, wt in enumerate(_taps(w)):
        off = (t // 3) * d * Wp + (t % 3) * d
        acc += flat[off:off + L] @ wt
    y = out.reshape(N, Hp, Wp, cout)[:, :H, :W]
    y += b
    return y, flat


def _conv_backward(dy: np.ndarray, flat: np.ndarray, w: np.ndarray, d: int, shape):
    """Gradients (dx, dw, db) of a same-padded convolution."""
    N, H, W, C = shape
    cout, _, k, _ = w.shape
    db = dy.sum(axis=(0, 1, 2))
    if k == 1:
        g = dy.reshape(-1, cout)
        dw = (g.T @ flat).reshape(w.shape)
        dx = (g @ w.reshape(cout, C)).reshape(shape)
        return dx, dw, db
    Hp, Wp = H + 2 * d, W + 2 * d
    M = N * Hp * Wp
    L = M - 2 * d * Wp - 2 * d
    gfull = np.zeros((N, Hp, Wp, cout), dtype=dy.dtype)
    gfull[:, :H, :W] = dy
    g = gfull.reshape(M, cout)[:L]
    dflat = np.zeros_like(flat)
    taps = _taps(w)
    dtaps = np.empty_like(taps)
    for t, wt in enumerate(taps):
        off = (t // 3) * d * Wp + (t % 3) * d
        dtaps[t] = flat[off:off + L].T @ g
        dflat[off:off + L] += g @ wt.T
    dw = dtaps.reshape(k, k, C, cout).transpose(3, 2, 0, 1)
    dx = dflat.reshape(N, Hp, Wp, C)[:, d:d + H, d:d + W]
    return dx, dw, db


# -- network ----------------------------------------------------------------

@dataclass
class Cache:
    token: int
    input_shape: tuple[int, ...]
    layers: list = field(default_factory=list)  # per layer: (flat, x_shape, relu_mask)


def _as_batch(params: NetParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != IN_CHANNELS:
        raise ShapeMismatch(f"expected (4, H, W) or (N, 4, H, W) input, got {x.shape}")
    if x.shape[2] < MIN_SIZE or x.shape[3] < MIN_SIZE:
        raise ShapeMismatch(f"spatial size must be >= {MIN_SIZE}, got {x.shape[2:]}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=params.dtype), single


def forward(params: NetParams, x, keep_cache: bool = True, gates=None):
    """Logits for a (4, H, W) input or an (N, 4, H, W) batch.

    Returns ``(logits, cache)``; ``cache`` is None unless ``keep_cache``.
    ``gates`` (the ReLU masks of an earlier cache) pins every ReLU on/off
    pattern, which gradient checks use to stay on one linear piece.
    """
    h, single = _as_batch(params, x)
    cache = Cache(params.token, h.shape) if keep_cache else None
    last = len(LAYERS) - 1
    for i, (name, _, _, _, d, residual, _) in enumerate(LAYERS):
        z, flat = _conv(h, params[f"{name}.weight"], params[f"{name}.bias"], d)
        if i == last:
            if cache is not None:
                cache.layers.append((flat, h.shape, None))
            h = z
            break
        a = z + h if residual else z
        mask = a > 0 if gates is None else gates[i]
        if cache is not None:
            cache.layers.append((flat, h.shape, mask))
        h = a * mask
    logits = h[..., 0]
    return (logits[0] if single else logits), cache


def gates_of(cache: Cache) -> list:
    return [mask for _, _, mask in cache.layers]


def backward(params: NetParams, cache: Cache, grad_logits) -> dict[str, np.ndarray]:
    if cache is None or cache.token != params.token:
        raise CacheMismatch("cache was produced by different parameters")
    g = np.asarray(grad_logits, dtype=params.dtype)
    N, H, W, _ = cache.input_shape
    if g.size != N * H * W:
        raise CacheMismatch(f"grad_logits shape {g.shape} does not match cached forward")
    g = g.reshape(N, H, W, 1)
    grads = {}
    for i in range(len(LAYERS) - 1, -1, -1):
        name, _, _, _, d, residual, _ = LAYERS[i]
        flat, x_shape, mask = cache.layers[i]
        dz = g if mask is None else g * mask
        dx, dw, db = _conv_backward(dz, flat, params[f"{name}.weight"], d, x_shape)
        grads[f"{name}.weight"] = dw
        grads[f"{name}.bias"] = db
        g = dx + dz if residual else dx
    return {k: grads[k] for k in param_shapes()}


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class LossReport:
    loss: float
    grad_logits: np.ndarray
    n_active: int


def bce_loss_masked(logits, target, mask) -> LossReport:
    """Mean binary cross-entropy over the active pixels of ``mask``.

    Inactive pixels contribute nothing and get an exactly-zero gradient.
    """
    z = np.asarray(logits)
    y = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if z.shape != y.shape or z.shape != m.shape:
        raise ShapeMismatch(f"shapes differ: {z.shape}, {y.shape}, {m.shape}")
    n = int(m.sum())
    if n == 0:
        raise EmptyMask("mask has no active pixels")
    za = z[m].astype(np.float64)
    ya = y[m]
    per_pixel = np.maximum(za, 0) - za * ya + np.log1p(np.exp(-np.abs(za)))
    grad = np.zeros(z.shape, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    grad[m] = (sigmoid(za) - ya) / n
    return LossReport(float(per_pixel.sum() / n), grad, n)


def sgd_step(params: NetParams, grads: dict, lr: float, momentum: float = 0.9,
             velocity: dict | None = None) -> tuple[NetParams, dict]:
    """v <- momentum*v + g;  p <- p - lr*v.  Returns new params and velocity."""
    if lr <= 0 or not 0 <= momentum < 1:
        raise ValueError("need lr > 0 and 0 <= momentum < 1")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedGradient(f"non-finite gradient in {k}")
    new_t, new_v = {}, {}
    for k, p in params.tensors.items():
        v = grads[k].astype(p.dtype)
        if velocity is not None and k in velocity:
            v = momentum * velocity[k] + v
        new_v[k] = v
        new_t[k] = p - lr * v
    return NetParams(new_t), new_v


# -- weights file -----------------------------------------------------------

def dumps_params(params: NetParams) -> bytes:
    names = params.names()
    out = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION), params.fingerprint,
           struct.pack("<I", len(names))]
    for n in names:
        t = params[n].astype("<f4")
        raw = n.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", GROUPS.index(group_of(n)), t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.tobytes())
    return b"".join(out)


def loads_params(buf: bytes) -> tuple[NetParams, dict[str, str]]:
    """Parse a weights file; returns the params and each tensor's stored group tag."""
    try:
        if buf[:4] != WEIGHTS_MAGIC:
            raise IncompatibleArchitecture("not a weights file")
        (version,) = struct.unpack_from("<I", buf, 4)
        fingerprint = buf[8:40]
        if version != WEIGHTS_VERSION or fingerprint != FINGERPRINT:
            raise IncompatibleArchitecture("architecture fingerprint mismatch")
        (count,) = struct.unpack_from("<I", buf, 40)
        off = 44
        tensors, tags = {}, {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + ln].decode()
            off += 4 + ln
            tag, rank = struct.unpack_from("<BI", buf, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims))
            if off + 4 * n > len(buf):
                raise IncompatibleArchitecture("truncated weights file")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            tags[name] = GROUPS[tag]
            off += 4 * n
        if off != len(buf):
            raise IncompatibleArchitecture("trailing bytes in weights file")
        return NetParams(tensors), tags
    except (struct.error, UnicodeDecodeError, IndexError, ValueError) as exc:
        raise IncompatibleArchitecture(f"corrupt weights file: {exc}") from exc


def save_params(params: NetParams, path) -> None:
    Path(path).write_bytes(dumps_params(params))


def load_params(path) -> NetParams:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return loads_params(p.read_bytes())[0]


def load_groups(path, groups, base: NetParams) -> tuple[NetParams, list[str]]:
    """Copy only the tensors of ``groups`` from a weights file onto ``base``.

    Returns the merged params and the names left untouched.
    """
    src = load_params(path)
    return merge_groups(src, base, groups)


def merge_groups(src: NetParams, base: NetParams, groups) -> tuple[NetParams, list[str]]:
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown groups {sorted(unknown)}")
    tensors, untouched = {}, []
    for n in base.names():
        if group_of(n) in groups:
            tensors[n] = src[n].copy()
        else:
            tensors[n] = base[n].copy()
            untouched.append(n)
    return NetParams(tensors), untouched
