"""Independent slow references used by the test suite.

Nothing here imports the package; every value is recomputed from scratch
with plain Python loops or exhaustive enumeration.
"""

import itertools
import math


def kernel(size, theta, lam=10.0, sigma=4.0, gamma=0.5, psi=0.0):
    rows = []
    for i in range(size):
        y = i - (size - 1) / 2.0
        row = []
        for j in range(size):
            x = j - (size - 1) / 2.0
            xr = x * math.cos(theta) + y * math.sin(theta)
            yr = -x * math.sin(theta) + y * math.cos(theta)
            row.append(math.exp(-(xr * xr + gamma * gamma * yr * yr) / (2 * sigma * sigma))
                       * math.cos(2 * math.pi * xr / lam + psi))
        rows.append(row)
    return rows


def reflect(i, n):
    # mirror about the edge sample without repeating it
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def correlate(plane, k):
    h, w, size = len(plane), len(plane[0]), len(k)
    half = size // 2
    out = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            s = 0.0
            for a in range(size):
                src = plane[reflect(y + a - half, h)]
                ka = k[a]
                for b in range(size):
                    s += ka[b] * src[reflect(x + b - half, w)]
            out[y][x] = s
    return out


THETAS = [0.0, math.pi / 8, math.pi / 4, math.pi / 2, -math.pi / 8, -math.pi / 4, -math.pi / 2]


def target_reference(image, size=10, thetas=THETAS, threshold=0.5):
    """``image[y][x][c]`` nested lists in [0, 1]; returns (intensity, binary) nested lists."""
    h, w = len(image), len(image[0])
    bank = [kernel(size, t) for t in thetas]
    gray = [[0.0] * w for _ in range(h)]
    for c, coef in enumerate((0.299, 0.587, 0.114)):
        plane = [[image[y][x][c] for x in range(w)] for y in range(h)]
        best = [[0.0] * w for _ in range(h)]
        for k in bank:
            resp = correlate(plane, k)
            for y in range(h):
                for x in range(w):
                    best[y][x] = max(best[y][x], abs(resp[y][x]))
        for y in range(h):
            for x in range(w):
                gray[y][x] += coef * (best[y][x] - plane[y][x])
    lo = min(min(r) for r in gray)
    hi = max(max(r) for r in gray)
    if hi - lo <= 1e-9:
        norm = [[0.0] * w for _ in range(h)]
    else:
        norm = [[(v - lo) / (hi - lo) for v in r] for r in gray]
    binary = [[1 if v > threshold else 0 for v in r] for r in norm]
    return norm, binary


def optimal_inertia(points, k):
    """Exhaustive minimum k-means inertia over every assignment of points to k labels."""
    best = math.inf
    d = len(points[0])
    for labels in itertools.product(range(k), repeat=len(points)):
        if len(set(labels)) < k:
            continue
        total = 0.0
        for c in range(k):
            members = [p for p, l in zip(points, labels) if l == c]
            mean = [sum(p[j] for p in members) / len(members) for j in range(d)]
            total += sum(sum((p[j] - mean[j]) ** 2 for j in range(d)) for p in members)
        best = min(best, total)
    return best


def sobel_reference(gray):
    """Sobel x/y gradients of a nested-list plane with reflect padding."""
    sx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    sy = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    return correlate(gray, sx), correlate(gray, sy)
