"""Central finite differences for the network, with ReLU gates held fixed.

The network is piecewise smooth; a perturbation of 1e-3 routinely moves some
pre-activation across zero, and the finite difference then measures a
different linear piece. Holding the gates of the unperturbed pass fixed
makes the finite difference estimate the derivative backward computes.
"""

import numpy as np

from afflab import convnet


def objective(params, x, gates, weights):
    logits, _ = convnet.forward(params, x, keep_cache=False, gates=gates)
    return float(np.sum(logits * weights))


def analytic(params, x, weights):
    logits, cache = convnet.forward(params, x)
    return convnet.backward(params, cache, weights.astype(logits.dtype)), convnet.gates_of(cache)


def fd_coord(params, x, gates, weights, name, idx, eps):
    t = params.tensors[name]
    old = t[idx]
    t[idx] = old + eps
    up = objective(params, x, gates, weights)
    t[idx] = old - eps
    down = objective(params, x, gates, weights)
    t[idx] = old
    return (up - down) / (2 * eps)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_case(rng, size=None):
    """float64 params, input, and a dense upstream gradient on a small image."""
    H, W = size or tuple(rng.integers(8, 13, size=2))
    n = int(rng.integers(1, 3))
    params = convnet.init_params(int(rng.integers(2 ** 31))).astype(np.float64)
    for k, v in params.tensors.items():
        if k.endswith("bias"):
            v[...] = rng.normal(0, 0.1, v.shape)
    x = rng.standard_normal((n, 4, H, W))
    weights = rng.standard_normal((n, H, W))
    return params, x, weights


def check_case(params, x, weights, rng, coords_per_tensor=3, eps=1e-3):
    """Max relative error over sampled coordinates and one random direction per tensor."""
    grads, gates = analytic(params, x, weights)
    worst = 0.0
    for name, t in params.tensors.items():
        flat = rng.choice(t.size, size=min(coords_per_tensor, t.size), replace=False)
        for f in flat:
            idx = np.unravel_index(f, t.shape)
            worst = max(worst, float(rel_err(grads[name][idx], fd_coord(params, x, gates, weights, name, idx, eps))))
        d = rng.standard_normal(t.shape)
        d /= np.linalg.norm(d)
        base = t.copy()
        t[...] = base + eps * d
        up = objective(params, x, gates, weights)
        t[...] = base - eps * d
        down = objective(params, x, gates, weights)
        t[...] = base
        worst = max(worst, float(rel_err(np.sum(grads[name] * d), (up - down) / (2 * eps))))
    return worst
