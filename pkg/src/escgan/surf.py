"""Blob keypoints from box-filtered Hessian determinants, and 64-D descriptors.

Second derivatives of a Gaussian are approximated by box filters evaluated in
constant time on an integral image. Filter side lengths follow the usual
lattice (9, 15, 21, 27 in the first octave, doubling steps in later octaves)
and responses are divided by the filter area so one threshold works at every
scale. The blob strength is ``Dxx * Dyy - (0.9 * Dxy) ** 2``.

Coordinates: ``x`` is the column and ``y`` the row, both in pixels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from escgan import kernels
from escgan.scalogram import Spectrogram

CROSS_WEIGHT = 0.9
BASE_SIZE = 9
BASE_SIGMA = 1.2
N_SCALES = 4
DESCRIPTOR_DIM = 64
NORM_EPS = 1e-12


class FilterOutOfBounds(ValueError):
    pass


@dataclass
class Keypoint:
    x: float
    y: float
    sigma: float
    response: float
    orientation: float = 0.0
    size: int = BASE_SIZE

    @property
    def radius(self) -> float:
        return self.size / 2.0


@dataclass
class Descriptor:
    vector: np.ndarray
    keypoint: Keypoint
    valid: bool = True


# -- integral image ------------------------------------------------------------------

def integral(img) -> np.ndarray:
    """Summed-area table with a leading zero row and column: ``ii[r, c] = img[:r, :c].sum()``."""
    px = img.pixels if isinstance(img, Spectrogram) else np.asarray(img)
    if px.ndim != 2:
        raise ValueError("integral image needs a 2-D array")
    ii = np.zeros((px.shape[0] + 1, px.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(px, axis=0, dtype=np.float64), axis=1, out=ii[1:, 1:])
    return ii


def box_sum(ii: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> float:
    """Sum of pixels in rows r0..r1 and columns c0..c1, bounds inclusive."""
    return float(ii[r1 + 1, c1 + 1] - ii[r0, c1 + 1] - ii[r1 + 1, c0] + ii[r0, c0])


# -- Hessian responses ---------------------------------------------------------------------

def size_for_sigma(sigma: float) -> int:
    # nearest lattice size 9 + 6k (odd and divisible by three)
    k = int(round((BASE_SIZE * sigma / BASE_SIGMA - BASE_SIZE) / 6))
    return BASE_SIZE + 6 * max(0, k)


def sigma_for_size(size: int) -> float:
    return BASE_SIGMA * size / BASE_SIZE


def filter_responses(ii: np.ndarray, row: int, col: int, size: int) -> tuple[float, float, float]:
    """Area-normalized (Dxx, Dyy, Dxy) at one pixel for a filter of side ``size``."""
    H, W = ii.shape[0] - 1, ii.shape[1] - 1
    b = (size - 1) // 2
    if row < b or col < b or row + b > H - 1 or col + b > W - 1:
        raise FilterOutOfBounds(f"filter {size} does not fit at ({row}, {col})")
    lobe = size // 3
    half = lobe // 2

    def box(r0, c0, h, w):
        return box_sum(ii, r0, c0, r0 + h - 1, c0 + w - 1)

    dxx = box(row - lobe + 1, col - b, 2 * lobe - 1, size) - 3 * box(row - lobe + 1, col - half, 2 * lobe - 1, lobe)
    dyy = box(row - b, col - lobe + 1, size, 2 * lobe - 1) - 3 * box(row - half, col - lobe + 1, lobe, 2 * lobe - 1)
    dxy = (box(row - lobe, col + 1, lobe, lobe) + box(row + 1, col - lobe, lobe, lobe)
           - box(row - lobe, col - lobe, lobe, lobe) - box(row + 1, col + 1, lobe, lobe))
    area = float(size * size)
    return dxx / area, dyy / area, dxy / area


def det_from_responses(dxx: float, dyy: float, dxy: float) -> float:
    return dxx * dyy - (CROSS_WEIGHT * dxy) ** 2


def hessian_det(ii: np.ndarray, x: int, y: int, sigma: float) -> float:
    """Blob response at column ``x``, row ``y`` for the filter matching ``sigma``."""
    return det_from_responses(*filter_responses(ii, int(y), int(x), size_for_sigma(sigma)))


def octave_sizes(octave: int) -> list[int]:
    step = 6 * (2 ** octave)
    first = BASE_SIZE + (2 ** octave - 1) * 6
    return [first + i * step for i in range(N_SCALES)]


def default_octaves(shape) -> int:
    return 2 if max(shape) >= 512 else 1


# -- detection -----------------------------------------------------------------------------------

def _disc_overlap(a: Keypoint, b: Keypoint) -> float:
    """Intersection area of the two detection discs over the smaller disc's area."""
    ra, rb = a.radius, b.radius
    d = math.hypot(a.x - b.x, a.y - b.y)
    if d >= ra + rb:
        return 0.0
    small = min(ra, rb)
    if d <= abs(ra - rb):
        return 1.0
    pa = ra * ra * math.acos((d * d + ra * ra - rb * rb) / (2 * d * ra))
    pb = rb * rb * math.acos((d * d + rb * rb - ra * ra) / (2 * d * rb))
    tri = 0.5 * math.sqrt(max(0.0, (-d + ra + rb) * (d + ra - rb) * (d - ra + rb) * (d + ra + rb)))
    return (pa + pb - tri) / (math.pi * small * small)


def suppress(candidates: Sequence[Keypoint], nms: float) -> list[Keypoint]:
    """Greedy overlap suppression: strongest first, ties row-major then smaller sigma."""
    order = sorted(candidates, key=lambda k: (-k.response, k.y, k.x, k.sigma))
    kept: list[Keypoint] = []
    for kp in order:
        if all(_disc_overlap(kp, other) <= nms for other in kept):
            kept.append(kp)
    kept.sort(key=lambda k: (k.y, k.x, k.sigma))
    return kept


def detect(ii: np.ndarray, threshold: float = 400.0, nms: float = 0.6,
           octaves: Optional[int] = None) -> list[Keypoint]:
    """Scale-space maxima of the Hessian determinant above ``threshold``, on an integral image."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if not 0 < nms <= 1:
        raise ValueError("nms must be in (0, 1]")
    ii = np.ascontiguousarray(ii, dtype=np.float64)
    H, W = ii.shape[0] - 1, ii.shape[1] - 1
    n_oct = default_octaves((H, W)) if octaves is None else int(octaves)
    candidates = []
    for o in range(n_oct):
        step = 2 ** o
        sizes = octave_sizes(o)
        maps = np.stack([kernels.hessian_map(ii, s, step) for s in sizes])
        for li in range(1, N_SCALES - 1):
            b = (sizes[li + 1] - 1) // 2  # the largest filter of the triple must fit
            mid = maps[li]
            rows = np.arange(mid.shape[0]) * step
            cols = np.arange(mid.shape[1]) * step
            ok_r = (rows >= b + step) & (rows + b + step <= H - 1)
            ok_c = (cols >= b + step) & (cols + b + step <= W - 1)
            cand = (mid > threshold) & ok_r[:, None] & ok_c[None, :]
            for r, c in zip(*np.nonzero(cand)):
                v = mid[r, c]
                cube = maps[li - 1:li + 2, r - 1:r + 2, c - 1:c + 2]
                if v >= cube.max():
                    size = sizes[li]
                    candidates.append(Keypoint(float(c * step), float(r * step), sigma_for_size(size),
                                               float(v), size=size))
    return suppress(candidates, nms)


# -- description ---------------------------------------------------------------------------------

def _haar(ii, rows, cols, size):
    rows = np.ascontiguousarray(np.round(rows), dtype=np.int64)
    cols = np.ascontiguousarray(np.round(cols), dtype=np.int64)
    return kernels.haar_sample(ii, rows, cols, int(size))


def _haar_size(multiple: float, sigma: float) -> int:
    return max(2, 2 * int(round(multiple * sigma / 2)))


def orientation(ii: np.ndarray, kp: Keypoint) -> float:
    """Dominant gradient direction within a 6-sigma disc (radians, in (-pi, pi])."""
    s = kp.sigma
    offs = np.arange(-6, 7)
    gi, gj = np.meshgrid(offs, offs, indexing="ij")
    inside = gi ** 2 + gj ** 2 < 36
    gi, gj = gi[inside], gj[inside]
    rows = kp.y + gi * s
    cols = kp.x + gj * s
    dx, dy = _haar(ii, rows, cols, _haar_size(4, s))
    w = np.exp(-(gi ** 2 + gj ** 2) / (2 * 2.5 ** 2))
    dx, dy = dx * w, dy * w
    ang = np.arctan2(dy, dx) % (2 * np.pi)
    best, best_norm = 0.0, -1.0
    for start in np.deg2rad(np.arange(0, 360, 5)):
        rel = (ang - start) % (2 * np.pi)
        sel = rel < np.pi / 3
        sx, sy = dx[sel].sum(), dy[sel].sum()
        norm = sx * sx + sy * sy
        if norm > best_norm + 1e-12 * max(best_norm, 1.0):
            best, best_norm = math.atan2(sy, sx), norm
    return float(best)


# sample grid in keypoint units: 20 x 20 points spaced one sigma apart
_GRID = np.arange(20) - 9.5


def describe(ii: np.ndarray, kp: Keypoint) -> Descriptor:
    """Oriented 4x4 x [sum dx, sum dy, sum |dx|, sum |dy|] descriptor, L2-normalized.

    A keypoint whose window has no gradient yields a zero vector and
    ``valid=False``.
    """
    s = kp.sigma
    theta = kp.orientation
    co, si = math.cos(theta), math.sin(theta)
    v, u = np.meshgrid(_GRID, _GRID, indexing="ij")  # v along the keypoint's y axis
    cols = kp.x + s * (u * co - v * si)
    rows = kp.y + s * (u * si + v * co)
    dx, dy = _haar(ii, rows.ravel(), cols.ravel(), _haar_size(2, s))
    rx = dx * co + dy * si
    ry = -dx * si + dy * co
    w = np.exp(-(u.ravel() ** 2 + v.ravel() ** 2) / (2 * 3.3 ** 2))
    rx = (rx * w).reshape(4, 5, 4, 5)
    ry = (ry * w).reshape(4, 5, 4, 5)
    feats = np.stack([rx.sum(axis=(1, 3)), ry.sum(axis=(1, 3)),
                      np.abs(rx).sum(axis=(1, 3)), np.abs(ry).sum(axis=(1, 3))], axis=-1)
    vec = feats.reshape(DESCRIPTOR_DIM)
    norm = np.linalg.norm(vec)
    if norm <= NORM_EPS:
        return Descriptor(np.zeros(DESCRIPTOR_DIM), kp, valid=False)
    return Descriptor(vec / norm, kp, valid=True)


def extract_all(img, threshold: float = 400.0, nms: float = 0.6,
                octaves: Optional[int] = None) -> list[Descriptor]:
    """Detect, orient and describe; zero-gradient descriptors are dropped."""
    ii = integral(img)
    out = []
    for kp in detect(ii, threshold, nms, octaves):
        kp.orientation = orientation(ii, kp)
        d = describe(ii, kp)
        if d.valid:
            out.append(d)
    return out


def descriptor_matrix(descriptors: Sequence[Descriptor]) -> np.ndarray:
    if not descriptors:
        return np.zeros((0, DESCRIPTOR_DIM))
    return np.stack([d.vector for d in descriptors])


# -- descriptor dump ----------------------------------------------------------------------------------

MAGIC = b"SURF"
_RECORD = struct.Struct("<4f64f")


def write_descriptors(path, descriptors: Sequence[Descriptor]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", len(descriptors), DESCRIPTOR_DIM))
        for d in descriptors:
            k = d.keypoint
            fh.write(_RECORD.pack(k.x, k.y, k.sigma, k.orientation, *d.vector))


def read_descriptors(path) -> list[Descriptor]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a descriptor file")
    count, dim = struct.unpack_from("<II", data, 4)
    if dim != DESCRIPTOR_DIM:
        raise ValueError(f"{path}: descriptor dimension {dim} != {DESCRIPTOR_DIM}")
    if len(data) != 12 + count * _RECORD.size:
        raise ValueError(f"{path}: truncated descriptor file")
    out = []
    for i in range(count):
        vals = _RECORD.unpack_from(data, 12 + i * _RECORD.size)
        sigma = float(vals[2])
        kp = Keypoint(vals[0], vals[1], sigma, 0.0, vals[3], size=size_for_sigma(sigma))
        out.append(Descriptor(np.array(vals[4:], dtype=np.float64), kp))
    return out
