"""Loop-based Canny and Harris used as independent oracles."""

import math
from collections import deque

import numpy as np


def gauss_weights(sigma):
    radius = max(1, int(3 * sigma + 0.5))
    w = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-radius, radius + 1)]
    s = sum(w)
    return [v / s for v in w], radius


def blur(img, sigma):
    H, W = img.shape
    w, R = gauss_weights(sigma)
    tmp = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            tmp[r, c] = sum(w[i + R] * img[min(max(r + i, 0), H - 1), c] for i in range(-R, R + 1))
    out = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            out[r, c] = sum(w[i + R] * tmp[r, min(max(c + i, 0), W - 1)] for i in range(-R, R + 1))
    return out


def sobel_at(img, r, c):
    H, W = img.shape

    def p(dr, dc):
        return img[min(max(r + dr, 0), H - 1), min(max(c + dc, 0), W - 1)]

    gx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1))
    gy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1))
    return gx, gy


def canny(gray, sigma=1.0, lo=0.1, hi=0.2):
    g = blur(np.asarray(gray, float), sigma)
    H, W = g.shape
    gx = np.zeros((H, W))
    gy = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            gx[r, c], gy[r, c] = sobel_at(g, r, c)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    out = np.zeros((H, W), np.uint8)
    if peak <= 0:
        return out

    def m(r, c):
        return mag[r, c] if 0 <= r < H and 0 <= c < W else 0.0

    keep = np.zeros((H, W), bool)
    for r in range(H):
        for c in range(W):
            a = math.degrees(math.atan2(gy[r, c], gx[r, c])) % 180.0
            if a < 22.5 or a >= 157.5:
                dr, dc = 0, 1
            elif a < 67.5:
                dr, dc = 1, 1
            elif a < 112.5:
                dr, dc = 1, 0
            else:
                dr, dc = 1, -1
            v = mag[r, c]
            keep[r, c] = v > 0 and v >= m(r - dr, c - dc) and v > m(r + dr, c + dc)
    weak = keep & (mag >= lo * peak)
    strong = keep & (mag >= hi * peak)
    seen = np.zeros((H, W), bool)
    queue = deque(zip(*np.nonzero(strong)))
    for rc in queue:
        seen[rc] = True
    while queue:
        r, c = queue.popleft()
        out[r, c] = 1
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < H and 0 <= cc < W and weak[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    queue.append((rr, cc))
    return out


def harris(gray, sigma=1.0, k=0.05, thresh=0.01):
    g = np.asarray(gray, float)
    H, W = g.shape
    ix = np.zeros((H, W))
    iy = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            ix[r, c], iy[r, c] = sobel_at(g, r, c)
    sxx, syy, sxy = blur(ix * ix, sigma), blur(iy * iy, sigma), blur(ix * iy, sigma)
    R = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    peak = R.max()
    out = np.zeros((H, W), np.uint8)
    if peak <= 0:
        return out
    for r in range(H):
        for c in range(W):
            nb = [R[rr, cc] for rr in range(r - 1, r + 2) for cc in range(c - 1, c + 2)
                  if 0 <= rr < H and 0 <= cc < W]
            out[r, c] = R[r, c] >= max(nb) and R[r, c] > thresh * peak
    return out
