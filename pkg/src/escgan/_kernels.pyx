# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics are pinned by escgan._fallback."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _box(const double[:, ::1] ii, Py_ssize_t r, Py_ssize_t c,
                        Py_ssize_t h, Py_ssize_t w) nogil:
    return ii[r + h, c + w] - ii[r, c + w] - ii[r + h, c] + ii[r, c]


cdef inline Py_ssize_t _clip(Py_ssize_t v, Py_ssize_t lo, Py_ssize_t hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef inline double _box_clamped(const double[:, ::1] ii, Py_ssize_t r0, Py_ssize_t c0,
                                Py_ssize_t r1, Py_ssize_t c1) nogil:
    cdef Py_ssize_t H = ii.shape[0] - 1
    cdef Py_ssize_t W = ii.shape[1] - 1
    r0 = _clip(r0, 0, H)
    r1 = _clip(r1, 0, H)
    c0 = _clip(c0, 0, W)
    c1 = _clip(c1, 0, W)
    if r1 <= r0 or c1 <= c0:
        return 0.0
    return ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]


def hessian_map(const double[:, ::1] ii, int size, int step):
    cdef Py_ssize_t H = ii.shape[0] - 1
    cdef Py_ssize_t W = ii.shape[1] - 1
    cdef Py_ssize_t nr = (H + step - 1) // step
    cdef Py_ssize_t nc = (W + step - 1) // step
    cdef Py_ssize_t l = size // 3
    cdef Py_ssize_t b = (size - 1) // 2
    cdef Py_ssize_t half = l // 2
    cdef double inv = 1.0 / (<double>size * size)
    cdef Py_ssize_t i, j, r, c
    cdef double dxx, dyy, dxy
    out = np.zeros((nr, nc), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(nr):
            r = i * step
            if r < b or r + b > H - 1:
                continue
            for j in range(nc):
                c = j * step
                if c < b or c + b > W - 1:
                    continue
                dxx = _box(ii, r - l + 1, c - b, 2 * l - 1, size) - 3.0 * _box(ii, r - l + 1, c - half, 2 * l - 1, l)
                dyy = _box(ii, r - b, c - l + 1, size, 2 * l - 1) - 3.0 * _box(ii, r - half, c - l + 1, l, 2 * l - 1)
                dxy = (_box(ii, r - l, c + 1, l, l) + _box(ii, r + 1, c - l, l, l)
                       - _box(ii, r - l, c - l, l, l) - _box(ii, r + 1, c + 1, l, l))
                dxx *= inv
                dyy *= inv
                dxy *= inv
                o[i, j] = dxx * dyy - 0.81 * dxy * dxy
    return out


def haar_sample(const double[:, ::1] ii, const cnp.int64_t[::1] rows,
                const cnp.int64_t[::1] cols, int size):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t k, r, c
    cdef Py_ssize_t h = size // 2
    dx_arr = np.empty(n, dtype=np.float64)
    dy_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] dx = dx_arr
    cdef double[::1] dy = dy_arr
    with nogil:
        for k in range(n):
            r = rows[k]
            c = cols[k]
            dx[k] = _box_clamped(ii, r - h, c, r + h, c + h) - _box_clamped(ii, r - h, c - h, r + h, c)
            dy[k] = _box_clamped(ii, r, c - h, r + h, c + h) - _box_clamped(ii, r - h, c - h, r, c + h)
    return dx_arr, dy_arr


def gini_split_scan(const double[::1] xs, const cnp.int64_t[::1] ys, int n_classes, int min_leaf):
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t i, k
    cdef cnp.int64_t sum_l2 = 0
    cdef cnp.int64_t sum_r2 = 0
    cdef double score, best = -1.0
    cdef double tol = 1e-12 * n
    cdef Py_ssize_t best_pos = -1
    cl_arr = np.zeros(n_classes, dtype=np.int64)
    cr_arr = np.bincount(np.asarray(ys), minlength=n_classes).astype(np.int64)
    cdef cnp.int64_t[::1] cl = cl_arr
    cdef cnp.int64_t[::1] cr = cr_arr
    scores_arr = np.full(n + 1, -1.0)
    cdef double[::1] scores = scores_arr
    for k in range(n_classes):
        sum_r2 += cr[k] * cr[k]
    with nogil:
        for i in range(1, n):
            k = ys[i - 1]
            sum_l2 += 2 * cl[k] + 1
            sum_r2 -= 2 * cr[k] - 1
            cl[k] += 1
            cr[k] -= 1
            if i < min_leaf or n - i < min_leaf:
                continue
            if not xs[i - 1] < xs[i]:
                continue
            score = (<double>sum_l2) / i + (<double>sum_r2) / (n - i)
            scores[i] = score
            if score > best:
                best = score
        if best >= 0.0:
            for i in range(1, n):
                if scores[i] >= 0.0 and scores[i] >= best - tol:
                    best_pos = i
                    break
    if best_pos < 0:
        return -1, -1.0
    return best_pos, scores[best_pos]
