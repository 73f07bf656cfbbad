"""A small reverse-mode autodiff engine over numpy arrays.

Operations executed inside a ``with Tape() as tape:`` block are recorded in
order; ``tape.backward(loss)`` walks the record backwards and accumulates
gradients into ``Tensor.grad``. Outside a tape nothing is recorded, which is
how inference and "detached" forward passes are expressed.

Shapes must match exactly for elementwise ops; there is no implicit
broadcasting. Convolutions, resizing and normalization expect NCHW tensors.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Record:
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self, check_finite: bool = False):
        self.records: list[_Record] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def record(self, out: Tensor, parents: tuple, backward) -> None:
        self.records.append(_Record(out, parents, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    tape = current_tape()
    if tape is not None:
        if tape.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
        if requires:
            tape.record(out, parents, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise and reductions ------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), lambda g: (g * k,))


def add_scalar(a: Tensor, k: float) -> Tensor:
    return _make(a.data + k, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.sum(axis=axis) / count

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop].copy(), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


# -- convolution and resizing ------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, H+2p, W+2p) -> (B, C*k*k, Ho*Wo), channel-major then kernel offset."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """'Same'-padded 2-D cross-correlation; output size is ceil(H / stride)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OCkk kernel")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    pad = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        gr = g.reshape(n, o, ho * wo)
        gw = np.tensordot(gr, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        dcols = np.matmul(wmat.T, gr).reshape(n, c, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        gx = dxp[:, :, pad:pad + h, pad:pad + wd]
        if b is None:
            return gx, gw
        return gx, gw, gr.sum(axis=(0, 2))

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights with corner alignment, shape (n_out, n_in)."""
    if n_out <= 0 or n_in <= 0:
        raise ValueError("sizes must be positive")
    if n_out == n_in:
        return np.eye(n_in, dtype=dtype)
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output size must be positive")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    my = interp_matrix(out_h, h, x.dtype)
    mx = interp_matrix(out_w, w, x.dtype)
    out = my @ x.data @ mx.T
    return _make(out, (x,), lambda g: (my.T @ g @ mx,))


# -- normalization ------------------------------------------------------------------

def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes, mu, var, eps):
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},)")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    gshape = (1, c, 1, 1)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        dxhat = g * gamma.data.reshape(gshape)
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        gx = inv_std / count * (count * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out, (x, gamma, beta), backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("instance_norm expects NCHW")
    axes = (2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    return _normalize(x, gamma, beta, axes, mu, var, eps)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def zeros(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: Optional[RunningStats] = None,
               training: bool = True, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects NCHW")
    axes = (0, 2, 3)
    if training or stats is None:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if stats is not None and training:
            n = x.data.size // x.shape[1]
            m = stats.momentum
            unbiased = var.ravel() * n / max(n - 1, 1)
            stats.mean = (1 - m) * stats.mean + m * mu.ravel()
            stats.var = (1 - m) * stats.var + m * unbiased
        return _normalize(x, gamma, beta, axes, mu, var, eps)
    mu = stats.mean.reshape(1, -1, 1, 1).astype(x.dtype)
    var = stats.var.reshape(1, -1, 1, 1).astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    gshape = (1, x.shape[1], 1, 1)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def backward(g):
        return (g * gamma.data.reshape(gshape) * inv_std,
                (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _make(out, (x, gamma, beta), backward)


# -- parameters ---------------------------------------------------------------------

def glorot_init(shape: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Uniform Glorot initialization; conv kernels are (out, in, kh, kw)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ValueError("glorot_init needs at least a 2-D shape")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
                   lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place adaptive-moment update; a missing gradient counts as zero."""
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(i, np.zeros_like(p.data))
        v = state.v.get(i, np.zeros_like(p.data))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 2e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        optimizer_step(self.params, [p.grad for p in self.params], self.state,
                       self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- serialization ------------------------------------------------------------------

PARAM_MAGIC = b"WCCG"
PARAM_VERSION = 1


def save_params(path, params: dict) -> None:
    """Write named arrays as little-endian f32 in a versioned container."""
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<II", PARAM_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name]
            arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != PARAM_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out
