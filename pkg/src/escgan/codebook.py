"""Spherical K-Means++ codebooks over local descriptors, and histogram encoding.

Codewords are unit columns of ``V`` (n x K). A descriptor is assigned to the
codeword with the largest *absolute* dot product, so antipodal descriptors
share a codeword. The centroid update accumulates ``X^T Z`` (``Z`` holds the
signed dot product of each row with its codeword) onto the previous
codewords and renormalizes, which for a fixed assignment is one power-method
step towards each cluster's principal axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse

MAGIC = b"SKMC"
UNIT_TOL = 1e-9


class DegenerateDataError(ValueError):
    """Fewer distinct descriptors than requested codewords."""


def normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def normalize_columns(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=0, keepdims=True)
    return np.divide(V, norms, out=np.zeros_like(V), where=norms > 0)


def _check_unit_rows(X: np.ndarray) -> None:
    if X.ndim != 2:
        raise ValueError("descriptor matrix must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError("descriptor matrix contains non-finite values")
    if X.shape[0] and np.abs(np.linalg.norm(X, axis=1) - 1).max() > 1e-6:
        raise ValueError("descriptor rows must have unit length")


def seed_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """D^2-weighted seeding; returns (V with K unit columns, chosen row indices)."""
    X = np.asarray(X, dtype=np.float64)
    _check_unit_rows(X)
    m = X.shape[0]
    if K < 1 or m < K:
        raise DegenerateDataError(f"need at least K={K} rows, got {m}")
    chosen = [int(rng.integers(m))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if not total > 0:
            raise DegenerateDataError(f"only {len(chosen)} distinct rows available for K={K}")
        idx = int(rng.choice(m, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return normalize_columns(X[chosen].T.copy()), chosen


def assign(X: np.ndarray, V: np.ndarray) -> sparse.csr_matrix:
    """One nonzero per row at argmax_l |V_l . x| (lowest index on ties), holding the signed dot."""
    X = np.asarray(X, dtype=np.float64)
    m, K = X.shape[0], V.shape[1]
    dots = X @ V
    j = np.argmax(np.abs(dots), axis=1)
    vals = dots[np.arange(m), j]
    # keep explicit zeros so every row has exactly one stored entry
    return sparse.csr_matrix((vals, j, np.arange(m + 1)), shape=(m, K))


def labels_of(Z: sparse.csr_matrix) -> np.ndarray:
    return np.asarray(Z.indices, dtype=np.int64)


def update(X: np.ndarray, Z: sparse.csr_matrix, V: np.ndarray) -> np.ndarray:
    """normalize_columns(X^T Z + V).

    With ``Z`` from :func:`assign` a column can never vanish (the update is
    (A + I) v with A positive semi-definite). For arbitrary ``Z`` a vanished
    column is re-seeded from the row farthest from the surviving codewords.
    """
    X = np.asarray(X, dtype=np.float64)
    out = normalize_columns(np.asarray((Z.T @ X).T) + V)
    live = np.linalg.norm(out, axis=0) > 0
    for j in np.nonzero(~live)[0]:
        closeness = np.abs(X @ out[:, live]).max(axis=1) if live.any() else np.zeros(X.shape[0])
        out[:, j] = X[int(np.argmin(closeness))]
        live[j] = True
    return out


def objective(X: np.ndarray, Z: sparse.csr_matrix) -> float:
    """Mean squared cosine between each row and its codeword.

    Non-decreasing under fit: assignment maximizes it for fixed codewords
    and each update is a power-method step on the cluster scatter matrix.
    """
    return float(np.mean(Z.data ** 2)) if Z.nnz else 0.0


def mean_abs_cosine(Z: sparse.csr_matrix) -> float:
    return float(np.abs(Z.data).mean()) if Z.nnz else 0.0


@dataclass
class Codebook:
    V: np.ndarray
    seed: int = 0
    iterations: int = 0
    objective_trace: list = field(default_factory=list)
    abs_cosine_trace: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.V.shape[1]

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    def save(self, path) -> None:
        save_codebook(path, self)


def fit(X: np.ndarray, K: int, max_iters: int = 100, seed: int = 0, tol: float = 1e-10) -> Codebook:
    """Seed, then alternate assign/update.

    Stops once the assignment no longer changes and the codewords have
    settled (largest coordinate change at most ``tol``), or after
    ``max_iters`` updates.
    """
    X = normalize_rows(X)
    rng = np.random.default_rng(seed)
    V, _ = seed_pp(X, K, rng)
    Z = assign(X, V)
    labels = labels_of(Z)
    trace = [objective(X, Z)]
    abs_trace = [mean_abs_cosine(Z)]
    it = 0
    while it < max_iters:
        V_new = update(X, Z, V)
        it += 1
        Z = assign(X, V_new)
        new_labels = labels_of(Z)
        trace.append(objective(X, Z))
        abs_trace.append(mean_abs_cosine(Z))
        moved = float(np.abs(V_new - V).max())
        V = V_new
        if np.array_equal(new_labels, labels) and moved <= tol:
            break
        labels = new_labels
    return Codebook(V, seed=seed, iterations=it, objective_trace=trace, abs_cosine_trace=abs_trace)


@dataclass
class CodeVector:
    values: np.ndarray
    image_id: str = ""
    label: Optional[str] = None
    empty: bool = False


def encode(descriptors: np.ndarray, V: np.ndarray, image_id: str = "", label=None) -> CodeVector:
    """L1-normalized histogram of hard assignments; no descriptors gives a flagged zero vector."""
    D = np.asarray(descriptors, dtype=np.float64).reshape(-1, V.shape[0])
    K = V.shape[1]
    if D.shape[0] == 0:
        return CodeVector(np.zeros(K), image_id, label, empty=True)
    counts = np.bincount(labels_of(assign(normalize_rows(D), V)), minlength=K).astype(np.float64)
    return CodeVector(counts / counts.sum(), image_id, label)


# -- file format ------------------------------------------------------------------------------------

def save_codebook(path, cb: Codebook) -> None:
    n, K = cb.V.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", n, K))
        fh.write(np.asarray(cb.V, dtype="<f8").tobytes(order="F"))
        fh.write(struct.pack("<QI", int(cb.seed), int(cb.iterations)))


def load_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a codebook file")
    n, K = struct.unpack_from("<II", data, 4)
    end = 12 + 8 * n * K
    if len(data) != end + 12:
        raise ValueError(f"{path}: truncated codebook file")
    V = np.frombuffer(data[12:end], dtype="<f8").reshape((n, K), order="F").astype(np.float64)
    seed, iters = struct.unpack_from("<QI", data, end)
    return Codebook(V, seed=seed, iterations=iters)
