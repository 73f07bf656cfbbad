"""Wavelet power spectrograms, 8-bit rendering, histogram equalization, PGM I/O.

Each row of the power grid is one wavelet scale (highest frequency on row 0)
and each column one analysis frame. A frame's value is the mean squared
magnitude of the complex Morlet coefficients over the frame's samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from escgan.audio_io import AudioClip, resample

MORLET_W0 = 6.0
DB_EPS = 1e-10
LEVELS = 256


class InputTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class ScalogramConfig:
    width: int = 768
    height: int = 384
    frame_ms: float = 50.0
    overlap: float = 0.5
    sample_rate: int = 8000
    fmin: float = 20.0
    fmax: Optional[float] = None  # Nyquist when unset

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if not 0 < self.overlap < 1:
            raise ValueError("overlap must be in (0, 1)")
        if self.frame_ms <= 0 or self.sample_rate <= 0:
            raise ValueError("frame_ms and sample_rate must be positive")
        if not self.scale_min < self.scale_max:
            raise ValueError("scale range is empty")

    @property
    def frame_len(self) -> int:
        return max(2, int(round(self.frame_ms * self.sample_rate / 1000.0)))

    @property
    def hop(self) -> int:
        return max(1, int(round(self.frame_len * (1.0 - self.overlap))))

    @property
    def top_frequency(self) -> float:
        return self.fmax if self.fmax is not None else self.sample_rate / 2.0

    # scale s (in samples) resonates at frequency w0 * rate / (2 pi s)
    @property
    def scale_min(self) -> float:
        return MORLET_W0 * self.sample_rate / (2 * np.pi * self.top_frequency)

    @property
    def scale_max(self) -> float:
        return MORLET_W0 * self.sample_rate / (2 * np.pi * self.fmin)

    def scales(self) -> np.ndarray:
        return np.geomspace(self.scale_min, self.scale_max, self.height)

    def frequencies(self) -> np.ndarray:
        return MORLET_W0 * self.sample_rate / (2 * np.pi * self.scales())


@dataclass
class Spectrogram:
    pixels: np.ndarray
    config: ScalogramConfig = field(default_factory=ScalogramConfig)
    clip_id: str = ""
    label: Optional[str] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError("pixels must be 2-D")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("intensities must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape


def _framed_signal(x: np.ndarray, cfg: ScalogramConfig) -> tuple[np.ndarray, int]:
    n, hop = cfg.frame_len, cfg.hop
    if x.size < n:
        raise InputTooShortError(f"clip has {x.size} samples, one frame needs {n}")
    n_frames = 1 + int(np.ceil((x.size - n) / hop))
    needed = (n_frames - 1) * hop + n
    if needed > x.size:
        # loop-pad to complete the last frame
        x = np.resize(x, needed)
    return x, n_frames


def morlet_power(x: np.ndarray, cfg: ScalogramConfig) -> np.ndarray:
    """|x * psi_s|^2 per sample for every scale, shape (height, len(x))."""
    n = x.size
    nfft = 1 << int(np.ceil(np.log2(n + 1)))
    spectrum = np.fft.fft(x, nfft)
    omega = 2 * np.pi * np.fft.fftfreq(nfft)
    out = np.empty((cfg.height, n))
    # highest frequency (smallest scale) on row 0
    for r, s in enumerate(cfg.scales()):
        response = np.where(omega > 0, np.exp(-0.5 * (s * omega - MORLET_W0) ** 2), 0.0)
        coef = np.fft.ifft(spectrum * response)[:n]
        out[r] = coef.real ** 2 + coef.imag ** 2
    return out


def dwt_power(clip: AudioClip, cfg: ScalogramConfig) -> np.ndarray:
    """Non-negative (height, width) power grid of a clip."""
    if clip.sample_rate != cfg.sample_rate:
        clip = resample(clip, cfg.sample_rate)
    x, n_frames = _framed_signal(clip.samples, cfg)
    power = morlet_power(x, cfg)
    csum = np.concatenate([np.zeros((cfg.height, 1)), np.cumsum(power, axis=1)], axis=1)
    starts = np.arange(n_frames) * cfg.hop
    frames = (csum[:, starts + cfg.frame_len] - csum[:, starts]) / cfg.frame_len
    cols = (np.arange(cfg.width) * n_frames) // cfg.width
    return np.maximum(frames[:, cols], 0.0)


def to_image(power: np.ndarray, cfg: Optional[ScalogramConfig] = None,
             clip_id: str = "", label=None) -> Spectrogram:
    power = np.asarray(power, dtype=np.float64)
    if np.any(power < 0):
        raise ValueError("power grid must be non-negative")
    db = 10.0 * np.log10(power + DB_EPS)
    lo, hi = db.min(), db.max()
    if hi - lo <= 0:
        px = np.zeros(db.shape, dtype=np.uint8)
    else:
        px = np.floor((LEVELS - 1) * (db - lo) / (hi - lo)).clip(0, LEVELS - 1).astype(np.uint8)
    if cfg is None:
        cfg = ScalogramConfig(width=power.shape[1], height=power.shape[0])
    return Spectrogram(px, cfg, clip_id, label)


def equalization_lut(pixels: np.ndarray) -> np.ndarray:
    counts = np.bincount(pixels.ravel(), minlength=LEVELS).astype(np.int64)
    cum = np.cumsum(counts)
    # floor((s - 1) * cdf) in exact integer arithmetic
    return ((LEVELS - 1) * cum // cum[-1]).astype(np.uint8)


def hist_equalize(img: Spectrogram) -> Spectrogram:
    lut = equalization_lut(img.pixels)
    return Spectrogram(lut[img.pixels], img.config, img.clip_id, img.label)


def clip_to_spectrogram(clip: AudioClip, cfg: ScalogramConfig, enhance: bool = True) -> Spectrogram:
    img = to_image(dwt_power(clip, cfg), cfg, clip.clip_id, clip.label)
    return hist_equalize(img) if enhance else img


def write_pgm(path, img: Spectrogram | np.ndarray) -> None:
    px = img.pixels if isinstance(img, Spectrogram) else np.asarray(img, dtype=np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(px, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1
    px = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if px.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return px.reshape(h, w).copy()


def spectrogram_name(clip_id: str) -> str:
    return f"{clip_id}.pgm"
