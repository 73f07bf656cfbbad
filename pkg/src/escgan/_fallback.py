"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Both backends must agree bit-for-bit on the integer-exact parts (split
positions, Haar sums of integer images) and to rounding on the rest;
``tests/test_kernels.py`` holds them to that.
"""

import numpy as np


def _box_grid(ii, r0, c0, h, w):
    """Box sums img[r0:r0+h, c0:c0+w] for broadcastable index arrays."""
    return ii[r0 + h, c0 + w] - ii[r0, c0 + w] - ii[r0 + h, c0] + ii[r0, c0]


def hessian_map(ii, size, step):
    H, W = ii.shape[0] - 1, ii.shape[1] - 1
    nr, nc = -(-H // step), -(-W // step)
    out = np.zeros((nr, nc))
    l = size // 3
    b = (size - 1) // 2
    half = l // 2
    rows = np.arange(nr) * step
    cols = np.arange(nc) * step
    ri = np.nonzero((rows >= b) & (rows + b <= H - 1))[0]
    ci = np.nonzero((cols >= b) & (cols + b <= W - 1))[0]
    if ri.size == 0 or ci.size == 0:
        return out
    r = rows[ri][:, None]
    c = cols[ci][None, :]
    dxx = _box_grid(ii, r - l + 1, c - b, 2 * l - 1, size) - 3.0 * _box_grid(ii, r - l + 1, c - half, 2 * l - 1, l)
    dyy = _box_grid(ii, r - b, c - l + 1, size, 2 * l - 1) - 3.0 * _box_grid(ii, r - half, c - l + 1, l, 2 * l - 1)
    dxy = (_box_grid(ii, r - l, c + 1, l, l) + _box_grid(ii, r + 1, c - l, l, l)
           - _box_grid(ii, r - l, c - l, l, l) - _box_grid(ii, r + 1, c + 1, l, l))
    inv = 1.0 / (float(size) * size)
    dxx = dxx * inv
    dyy = dyy * inv
    dxy = dxy * inv
    out[np.ix_(ri, ci)] = dxx * dyy - 0.81 * dxy * dxy
    return out


def _box_clamped(ii, r0, c0, r1, c1):
    H, W = ii.shape[0] - 1, ii.shape[1] - 1
    r0 = np.clip(r0, 0, H)
    r1 = np.clip(r1, 0, H)
    c0 = np.clip(c0, 0, W)
    c1 = np.clip(c1, 0, W)
    s = ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]
    return np.where((r1 > r0) & (c1 > c0), s, 0.0)


def haar_sample(ii, rows, cols, size):
    h = size // 2
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    dx = _box_clamped(ii, r - h, c, r + h, c + h) - _box_clamped(ii, r - h, c - h, r + h, c)
    dy = _box_clamped(ii, r, c - h, r + h, c + h) - _box_clamped(ii, r - h, c - h, r, c + h)
    return dx, dy


def gini_split_scan(xs, ys, n_classes, min_leaf):
    n = xs.shape[0]
    if n < 2:
        return -1, -1.0
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), ys] = 1
    left = np.cumsum(onehot, axis=0)[:-1]
    right = left[-1] + onehot[-1] - left
    nl = np.arange(1, n)
    scores = (left * left).sum(axis=1) / nl + (right * right).sum(axis=1) / (n - nl)
    valid = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
    if not valid.any():
        return -1, -1.0
    best = scores[valid].max()
    pos = int(np.nonzero(valid & (scores >= best - 1e-12 * n))[0][0]) + 1
    return pos, float(scores[pos - 1])
