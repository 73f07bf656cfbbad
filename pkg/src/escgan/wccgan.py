"""Weighted cycle-consistent GAN for spectrogram-to-spectrogram augmentation.

Two generators translate source to target (``f_st``, with a residual trunk)
and target to source (``f_ts``). Each discriminator sees real samples of its
domain and a *bypassed* fake: a weighted mix of the generator's input and its
output, ``c * real_input + w * generated``. The cycle term is computed on the
raw generator outputs.

Images enter the networks scaled to [-1, 1] at ``GanHyperparams.net_shape``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from escgan import tensor as T
from escgan.scalogram import Spectrogram

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.3
ALPHA_WARN = 0.45


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


# -- hyperparameters ------------------------------------------------------------------

@dataclass
class GanHyperparams:
    c1: float = 0.62
    c2: float = 0.36
    mu: float = 0.14
    sigma: float = 0.57
    alpha: float = 0.03
    n_res_blocks: int = 3
    epochs: int = 20
    patience: int = 10
    batch_size: int = 4
    seed: int = 0
    lr: float = 2e-4
    gen_channels: tuple = (64, 128)
    disc_channels: tuple = (64, 128)
    net_shape: tuple = (48, 96)
    val_fraction: float = 0.1
    dtype: str = "float32"

    def validate(self) -> "GanHyperparams":
        for name in ("c1", "c2", "mu", "sigma", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 3 <= self.n_res_blocks <= 7:
            raise ValueError("n_res_blocks must be within [3, 7]")
        if self.alpha > ALPHA_WARN:
            warnings.warn(f"alpha={self.alpha} exceeds {ALPHA_WARN}; generators may not converge", stacklevel=2)
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be positive")
        return self


# bypass and cycle weights found per dataset by the original authors
GAN_PRESETS = {
    "esc10": dict(c1=0.49, c2=0.67, mu=0.02, sigma=0.76, alpha=0.23),
    "esc50": dict(c1=0.39, c2=0.68, mu=0.12, sigma=0.58, alpha=0.19),
    "urbansound8k": dict(c1=0.62, c2=0.36, mu=0.14, sigma=0.57, alpha=0.03),
    "dcase2017": dict(c1=0.03, c2=0.21, mu=0.18, sigma=0.43, alpha=0.31),
}


def preset(name: str, **overrides) -> GanHyperparams:
    return GanHyperparams(**{**GAN_PRESETS[name], **overrides}).validate()


# -- layers ---------------------------------------------------------------------------

class Conv:
    def __init__(self, cin, cout, stride, rng, dtype):
        self.w = T.glorot_init((cout, cin, 3, 3), rng, dtype)
        self.b = T.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, self.stride)

    def params(self):
        return {"w": self.w, "b": self.b}


class InstanceNorm:
    def __init__(self, channels, dtype):
        self.gamma = T.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.instance_norm(x, self.gamma, self.beta)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class BatchNorm(InstanceNorm):
    def __init__(self, channels, dtype):
        super().__init__(channels, dtype)
        self.stats = T.RunningStats.zeros(channels)
        self.training = True

    def __call__(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.stats, self.training)


class Network:
    """Named parameter bookkeeping shared by generators and discriminators."""

    def layers(self) -> dict:
        raise NotImplementedError

    def parameters(self) -> dict:
        out = {}
        for lname, layer in self.layers().items():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def buffers(self) -> dict:
        out = {}
        for lname, layer in self.layers().items():
            if isinstance(layer, BatchNorm):
                out[f"{lname}.running_mean"] = layer.stats.mean
                out[f"{lname}.running_var"] = layer.stats.var
        return out

    def load_state(self, state: dict) -> None:
        params = self.parameters()
        for name, p in params.items():
            p.data = np.asarray(state[name], dtype=p.dtype).reshape(p.shape)
        for lname, layer in self.layers().items():
            if isinstance(layer, BatchNorm):
                layer.stats.mean = np.asarray(state[f"{lname}.running_mean"], dtype=np.float64)
                layer.stats.var = np.asarray(state[f"{lname}.running_var"], dtype=np.float64)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))


class Generator(Network):
    """conv -> strided conv -> residual trunk -> bilinear upsample -> conv -> linear conv."""

    def __init__(self, n_res_blocks: int, channels: Sequence[int], rng, dtype=np.float32, trunk: bool = True):
        c1, c2 = channels
        self.n_res_blocks = n_res_blocks if trunk else 0
        self.enc0 = Conv(1, c1, 1, rng, dtype)
        self.enc0_norm = InstanceNorm(c1, dtype)
        self.enc1 = Conv(c1, c2, 2, rng, dtype)
        self.enc1_norm = InstanceNorm(c2, dtype)
        self.blocks = []
        for _ in range(self.n_res_blocks):
            self.blocks.append((Conv(c2, c2, 1, rng, dtype), InstanceNorm(c2, dtype),
                                Conv(c2, c2, 1, rng, dtype), InstanceNorm(c2, dtype)))
        self.dec0 = Conv(c2, c1, 1, rng, dtype)
        self.dec0_norm = InstanceNorm(c1, dtype)
        self.out = Conv(c1, 1, 1, rng, dtype)

    def layers(self):
        out = {"enc0": self.enc0, "enc0_norm": self.enc0_norm, "enc1": self.enc1, "enc1_norm": self.enc1_norm}
        for i, (ca, na, cb, nb) in enumerate(self.blocks):
            out.update({f"res{i}.conv_a": ca, f"res{i}.norm_a": na, f"res{i}.conv_b": cb, f"res{i}.norm_b": nb})
        out.update({"dec0": self.dec0, "dec0_norm": self.dec0_norm, "out": self.out})
        return out

    def __call__(self, x: T.Tensor) -> T.Tensor:
        h_in, w_in = x.shape[-2:]
        h = T.leaky_relu(self.enc0_norm(self.enc0(x)), LEAKY_SLOPE)
        h = T.leaky_relu(self.enc1_norm(self.enc1(h)), LEAKY_SLOPE)
        for conv_a, norm_a, conv_b, norm_b in self.blocks:
            r = T.leaky_relu(norm_a(conv_a(h)), LEAKY_SLOPE)
            r = norm_b(conv_b(r))
            r = T.bilinear_resize(r, *h.shape[-2:])
            h = h + r
        h = T.bilinear_resize(h, h_in, w_in)
        h = T.leaky_relu(self.dec0_norm(self.dec0(h)), LEAKY_SLOPE)
        return self.out(h)


class Discriminator(Network):
    """Two conv/BN/ReLU stages (strides 1 and 2), a 1-channel conv, global mean."""

    def __init__(self, channels: Sequence[int], rng, dtype=np.float32):
        d1, d2 = channels
        self.conv0 = Conv(1, d1, 1, rng, dtype)
        self.norm0 = BatchNorm(d1, dtype)
        self.conv1 = Conv(d1, d2, 2, rng, dtype)
        self.norm1 = BatchNorm(d2, dtype)
        self.head = Conv(d2, 1, 1, rng, dtype)

    def layers(self):
        return {"conv0": self.conv0, "norm0": self.norm0, "conv1": self.conv1, "norm1": self.norm1,
                "head": self.head}

    def train_mode(self, flag: bool) -> None:
        self.norm0.training = flag
        self.norm1.training = flag

    def __call__(self, x: T.Tensor) -> T.Tensor:
        h = T.relu(self.norm0(self.conv0(x)))
        h = T.relu(self.norm1(self.conv1(h)))
        return T.mean(self.head(h), axis=(1, 2, 3))


def build_generator(n_res_blocks: int, channels: Sequence[int] = (64, 128), rng=None,
                    dtype=np.float32, trunk: bool = True) -> Generator:
    if not 3 <= n_res_blocks <= 7:
        raise ValueError("n_res_blocks must be within [3, 7]")
    rng = rng if rng is not None else np.random.default_rng(0)
    return Generator(n_res_blocks, channels, rng, dtype, trunk)


def build_discriminator(channels: Sequence[int] = (64, 128), rng=None, dtype=np.float32) -> Discriminator:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Discriminator(channels, rng, dtype)


# -- losses ---------------------------------------------------------------------------

def f_bypass(real_input: T.Tensor, generated: T.Tensor, c: float, w: float) -> T.Tensor:
    """c * real_input + w * generated, with real_input resized to generated's shape."""
    real = T.bilinear_resize(real_input, *generated.shape[-2:])
    if c == 0:
        return T.scale(generated, w)
    if w == 0:
        return T.scale(real, c)
    return T.scale(real, c) + T.scale(generated, w)


def lsgan_losses(D: Discriminator, real: T.Tensor, fake_bypassed: T.Tensor):
    """(discriminator loss, generator loss) of the least-squares game.

    Real and fake go through the discriminator as one batch so batch
    normalization sees both.
    """
    n = real.shape[0]
    scores = D(T.concat([real, fake_bypassed]))
    d_real = T.slice_batch(scores, 0, n)
    d_fake = T.slice_batch(scores, n, scores.shape[0])
    return lsgan_from_scores(d_real, d_fake)


def lsgan_from_scores(d_real: T.Tensor, d_fake: T.Tensor):
    loss_d = T.mean(T.square(d_real - 1.0)) + T.mean(T.square(d_fake))
    loss_g = T.mean(T.square(d_fake - 1.0))
    return loss_d, loss_g


def cycle_loss(f_st, f_ts, batch_s: T.Tensor, batch_t: T.Tensor) -> T.Tensor:
    back_s = f_ts(f_st(batch_s))
    back_t = f_st(f_ts(batch_t))
    return T.mean(T.abs(back_s - batch_s)) + T.mean(T.abs(back_t - batch_t))


def total_loss(lsgan_st, lsgan_ts, cycle, alpha: float):
    """Adversarial terms of both directions plus alpha times the cycle term."""
    if alpha == 0:
        return lsgan_st + lsgan_ts
    return lsgan_st + lsgan_ts + cycle * alpha


# -- model bundle -----------------------------------------------------------------------

class WCCGAN:
    def __init__(self, hyper: GanHyperparams, rng=None):
        self.hyper = hyper
        dtype = np.dtype(hyper.dtype)
        rng = rng if rng is not None else np.random.default_rng(hyper.seed)
        self.f_st = build_generator(hyper.n_res_blocks, hyper.gen_channels, rng, dtype)
        self.f_ts = build_generator(hyper.n_res_blocks, hyper.gen_channels, rng, dtype, trunk=False)
        self.d_s = build_discriminator(hyper.disc_channels, rng, dtype)
        self.d_t = build_discriminator(hyper.disc_channels, rng, dtype)

    def networks(self) -> dict:
        return {"f_st": self.f_st, "f_ts": self.f_ts, "d_s": self.d_s, "d_t": self.d_t}

    def generator_params(self):
        return list(self.f_st.parameters().values()) + list(self.f_ts.parameters().values())

    def discriminator_params(self):
        return list(self.d_s.parameters().values()) + list(self.d_t.parameters().values())

    def bypass_st(self, s, fake_t):
        return f_bypass(s, fake_t, self.hyper.c1, self.hyper.mu)

    def bypass_ts(self, t, fake_s):
        return f_bypass(t, fake_s, self.hyper.c2, self.hyper.sigma)

    def losses(self, s: T.Tensor, t: T.Tensor) -> dict:
        """All loss components on one (source, target) batch pair."""
        fake_t = self.f_st(s)
        fake_s = self.f_ts(t)
        loss_dt, loss_g_st = lsgan_losses(self.d_t, t, self.bypass_st(s, fake_t))
        loss_ds, loss_g_ts = lsgan_losses(self.d_s, s, self.bypass_ts(t, fake_s))
        back_s = self.f_ts(fake_t)
        back_t = self.f_st(fake_s)
        cyc = T.mean(T.abs(back_s - s)) + T.mean(T.abs(back_t - t))
        return {
            "loss_D_S": loss_ds, "loss_D_T": loss_dt,
            "loss_G_ST": loss_g_st, "loss_G_TS": loss_g_ts,
            "cycle": cyc,
            "total": total_loss(loss_dt, loss_ds, cyc, self.hyper.alpha),
        }

    def state(self) -> dict:
        out = {}
        for net_name, net in self.networks().items():
            for k, v in {**net.parameters(), **net.buffers()}.items():
                out[f"{net_name}.{k}"] = v.data if isinstance(v, T.Tensor) else v
        return out

    def load_state(self, state: dict) -> None:
        for net_name, net in self.networks().items():
            prefix = net_name + "."
            net.load_state({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def save(self, path) -> None:
        T.save_params(path, self.state())

    @classmethod
    def load(cls, path, hyper: GanHyperparams) -> "WCCGAN":
        model = cls(hyper)
        model.load_state(T.load_params(path))
        return model


# -- pairing ----------------------------------------------------------------------------

@dataclass
class Pair:
    source: str
    target: str
    mode: str  # "intra" or "inter"
    source_idx: Optional[np.ndarray] = None
    target_idx: Optional[np.ndarray] = None

    @property
    def key(self) -> str:
        return f"{self.source}_to_{self.target}" + ("_intra" if self.mode == "intra" else "")


@dataclass
class PairPlan:
    pairs: list = field(default_factory=list)

    def inter(self):
        return [p for p in self.pairs if p.mode == "inter"]

    def intra(self):
        return [p for p in self.pairs if p.mode == "intra"]


def select_pairs(confusion, classes: Sequence[str], class_sizes: Optional[Sequence[int]] = None,
                 seed: int = 0) -> PairPlan:
    """Inter-class pair (S, most-confused T) per class plus one intra pair per class.

    Intra pairs split the class's samples 50/50 at random when ``class_sizes``
    is given; otherwise the split is left to training.
    """
    m = np.asarray(confusion, dtype=np.float64)
    k = len(classes)
    if m.shape != (k, k):
        raise ValueError(f"confusion matrix must be {k}x{k}")
    if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("confusion rows must sum to 1")
    rng = np.random.default_rng(seed)
    plan = PairPlan()
    for i, cls in enumerate(classes):
        off = m[i].copy()
        off[i] = -np.inf
        j = int(np.argmax(off))
        if off[j] > 0:
            plan.pairs.append(Pair(cls, classes[j], "inter"))
    for i, cls in enumerate(classes):
        pair = Pair(cls, cls, "intra")
        if class_sizes is not None:
            perm = rng.permutation(int(class_sizes[i]))
            half = len(perm) // 2
            pair.source_idx, pair.target_idx = np.sort(perm[:half]), np.sort(perm[half:])
        plan.pairs.append(pair)
    return plan


# -- training ---------------------------------------------------------------------------

def to_net_input(pixels: np.ndarray, net_shape, dtype=np.float32) -> np.ndarray:
    """uint8 images (N, H, W) or (H, W) -> (N, 1, h, w) in [-1, 1] at the network resolution."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[None]
    x = px[:, None] / 127.5 - 1.0
    x = T.bilinear_resize(T.Tensor(x), *net_shape).data
    return x.astype(dtype)


def from_net_output(y: np.ndarray, shape) -> np.ndarray:
    """(1, 1, h, w) network output -> uint8 image of ``shape``."""
    y = T.bilinear_resize(T.Tensor(np.asarray(y, dtype=np.float64)), *shape).data[0, 0]
    return np.clip(np.round((np.clip(y, -1.0, 1.0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class TrainResult:
    model: WCCGAN
    history: list
    stopped_early: bool = False

    def write_history(self, path) -> None:
        write_history(path, self.history)


HISTORY_FIELDS = ["epoch", "loss_D_S", "loss_D_T", "loss_G_ST", "loss_G_TS", "cycle", "total", "val_f1", "val_acc"]


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{row[k]:.9g}" if isinstance(row[k], float) else row[k]) for k in HISTORY_FIELDS})


def _split_val(n: int, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = max(1, int(round(frac * n)))
    if n - n_val < 1:
        raise ValueError("need at least 2 samples per side")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def discriminator_scores(model: WCCGAN, s: np.ndarray, t: np.ndarray):
    """Eval-mode scores: (real-T, fake-T, real-S, fake-S)."""
    for d in (model.d_s, model.d_t):
        d.train_mode(False)
    try:
        st, tt = T.Tensor(s), T.Tensor(t)
        fake_t = model.bypass_st(st, model.f_st(st))
        fake_s = model.bypass_ts(tt, model.f_ts(tt))
        return (model.d_t(tt).data, model.d_t(fake_t).data, model.d_s(st).data, model.d_s(fake_s).data)
    finally:
        for d in (model.d_s, model.d_t):
            d.train_mode(True)


def discriminator_metrics(model: WCCGAN, s: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    """(F1 of the 'real' decision, accuracy) pooled over both discriminators."""
    rt, ft, rs, fs = discriminator_scores(model, s, t)
    real = np.concatenate([rt, rs]) > 0.5
    fake = np.concatenate([ft, fs]) > 0.5
    tp, fn, fp = int(real.sum()), int((~real).sum()), int(fake.sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    acc = (tp + int((~fake).sum())) / (real.size + fake.size)
    return f1, acc


def train_pair(source: np.ndarray, target: np.ndarray, hyper: GanHyperparams,
               snapshot_dir: Optional[Path] = None) -> TrainResult:
    """Train one WCCGAN on network-ready arrays (N, 1, h, w) in [-1, 1]."""
    hyper.validate()
    rng = np.random.default_rng(hyper.seed)
    model = WCCGAN(hyper, rng)
    s_train, s_val = _split_val(len(source), hyper.val_fraction, rng)
    t_train, t_val = _split_val(len(target), hyper.val_fraction, rng)
    opt_g = T.Adam(model.generator_params(), lr=hyper.lr)
    opt_d = T.Adam(model.discriminator_params(), lr=hyper.lr)
    history = []
    best_f1, since_best = -1.0, 0
    bs = hyper.batch_size
    n_steps = int(np.ceil(max(len(s_train), len(t_train)) / bs))
    for epoch in range(1, hyper.epochs + 1):
        s_order = rng.permutation(np.resize(rng.permutation(s_train), n_steps * bs))
        t_order = rng.permutation(np.resize(rng.permutation(t_train), n_steps * bs))
        sums = dict.fromkeys(HISTORY_FIELDS[1:7], 0.0)
        for step in range(n_steps):
            s = T.Tensor(source[s_order[step * bs:(step + 1) * bs]])
            t = T.Tensor(target[t_order[step * bs:(step + 1) * bs]])
            # discriminator update with generators frozen
            fake_t = model.f_st(s).detach()
            fake_s = model.f_ts(t).detach()
            opt_d.zero_grad()
            with T.Tape() as tape:
                loss_dt, _ = lsgan_losses(model.d_t, t, model.bypass_st(s, fake_t))
                loss_ds, _ = lsgan_losses(model.d_s, s, model.bypass_ts(t, fake_s))
                loss_d = loss_dt + loss_ds
            tape.backward(loss_d)
            opt_d.step()
            # generator update
            opt_g.zero_grad()
            with T.Tape() as tape:
                parts = model.losses(s, t)
                loss_g = parts["loss_G_ST"] + parts["loss_G_TS"] + parts["cycle"] * hyper.alpha
            tape.backward(loss_g)
            opt_g.step()
            opt_d.zero_grad()
            values = {
                "loss_D_S": loss_ds.item(), "loss_D_T": loss_dt.item(),
                "loss_G_ST": parts["loss_G_ST"].item(), "loss_G_TS": parts["loss_G_TS"].item(),
                "cycle": parts["cycle"].item(),
            }
            values["total"] = values["loss_D_S"] + values["loss_D_T"] + hyper.alpha * values["cycle"]
            if not all(np.isfinite(v) for v in values.values()):
                snapshot = {"epoch": epoch, "step": step, **values}
                if snapshot_dir is not None:
                    model.save(Path(snapshot_dir) / f"diverged_epoch{epoch}.wccg")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {values}", snapshot)
            for k, v in values.items():
                sums[k] += v
        row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        f1, acc = discriminator_metrics(model, source[s_val], target[t_val])
        row["val_f1"], row["val_acc"] = f1, acc
        history.append(row)
        logger.debug("epoch %d %s", epoch, row)
        if f1 > best_f1:
            best_f1, since_best = f1, 0
        else:
            since_best += 1
            if since_best >= hyper.patience:
                return TrainResult(model, history, stopped_early=True)
    return TrainResult(model, history)


def generate(generator: Generator, s: Spectrogram, net_shape, label=None, clip_id: str = "") -> Spectrogram:
    """Translate one spectrogram; output has the input's size and 8-bit range."""
    x = to_net_input(s.pixels, net_shape, generator.out.w.dtype)
    y = generator(T.Tensor(x)).data
    px = from_net_output(y, s.pixels.shape)
    return Spectrogram(px, s.config, clip_id or f"{s.clip_id}__gan", label if label is not None else s.label)


def allocate(n_total: int, n_pairs: int) -> list[int]:
    """Split a requested number of generated samples across pairs, remainder first."""
    if n_pairs <= 0:
        return []
    base, extra = divmod(int(n_total), n_pairs)
    return [base + (1 if i < extra else 0) for i in range(n_pairs)]


def hyper_dict(h: GanHyperparams) -> dict:
    return asdict(h)
