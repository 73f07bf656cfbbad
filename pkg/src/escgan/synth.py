"""Synthetic data: tonal audio mini-datasets and toy two-class images.

The public benchmark corpora cannot be redistributed, so tests and the
``synth`` CLI command build small stand-ins from tones, chirps and noise
bursts. Everything is a deterministic function of the seed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from escgan.audio_io import AudioClip, save_wav

CLASS_NAMES = ("tone", "chirp", "burst", "warble", "clicks")


def _events(n, rate, rng, count, dur_range, make):
    """Sum of Hann-windowed events placed at random onsets."""
    out = np.zeros(n)
    for _ in range(count):
        m = min(n, max(8, int(rng.uniform(*dur_range) * rate)))
        start = int(rng.integers(0, n - m + 1))
        out[start:start + m] += np.hanning(m) * make(np.arange(m) / rate, m)
    return out


def _tone(n, rate, rng):
    """Short tone pips between 300 and 700 Hz."""
    def pip(t, m):
        return np.sin(2 * np.pi * rng.uniform(300.0, 700.0) * t)
    return _events(n, rate, rng, max(1, int(rng.integers(6, 11)) * n // rate), (0.04, 0.1), pip)


def _chirp(n, rate, rng):
    """Rising sweeps from about 1 kHz to 2.5 times that."""
    def sweep(t, m):
        f0, dur = rng.uniform(800.0, 1200.0), m / rate
        return np.sin(2 * np.pi * (f0 * t + 0.75 * f0 * t ** 2 / dur))
    return _events(n, rate, rng, max(1, int(rng.integers(3, 6)) * n // rate), (0.12, 0.2), sweep)


def _burst(n, rate, rng):
    """Noise bursts band-limited around 1.5-3 kHz."""
    def band(t, m):
        spec = np.fft.rfft(rng.standard_normal(m))
        freqs = np.fft.rfftfreq(m, 1.0 / rate)
        spec[np.abs(freqs - rng.uniform(1500.0, 3000.0)) > 300.0] = 0
        b = np.fft.irfft(spec, m)
        return b / max(np.abs(b).max(), 1e-9)
    return _events(n, rate, rng, max(1, int(rng.integers(4, 9)) * n // rate), (0.04, 0.08), band)


def _warble(n, rate, rng):
    """Frequency-modulated tones around 1.2-1.6 kHz."""
    def fm(t, m):
        fc, depth, rate_hz = rng.uniform(1200, 1600), rng.uniform(150, 300), rng.uniform(8, 15)
        return np.sin(2 * np.pi * fc * t + depth / rate_hz * np.sin(2 * np.pi * rate_hz * t))
    return _events(n, rate, rng, max(1, int(rng.integers(2, 4)) * n // rate), (0.2, 0.3), fm)


def _clicks(n, rate, rng):
    """Click trains: broadband impulses every 60-120 ms."""
    out = np.zeros(n)
    period = int(rate * rng.uniform(0.06, 0.12))
    out[int(rng.integers(0, period))::period] = 1.0
    return out


_MAKERS = {"tone": _tone, "chirp": _chirp, "burst": _burst, "warble": _warble, "clicks": _clicks}


def tonal_clips(n_per_class: int = 50, n_classes: int = 3, duration: float = 1.0,
                sample_rate: int = 8000, noise: float = 0.05, seed: int = 0) -> list[AudioClip]:
    """``n_per_class`` clips for each of the first ``n_classes`` signal families."""
    if not 1 <= n_classes <= len(CLASS_NAMES):
        raise ValueError(f"n_classes must be within [1, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    clips = []
    for name in CLASS_NAMES[:n_classes]:
        for i in range(n_per_class):
            x = _MAKERS[name](n, sample_rate, rng)
            x = x / max(np.abs(x).max(), 1e-9) * rng.uniform(0.4, 0.8)
            x = x + noise * rng.standard_normal(n)
            clips.append(AudioClip(np.clip(x, -1, 1), sample_rate, label=name, source_id=f"{name}_{i:03d}"))
    return clips


def write_dataset(out_dir, n_per_class: int = 50, n_classes: int = 3, n_folds: int = 5,
                  seed: int = 0, **kwargs) -> Path:
    """Write WAVs plus a ``manifest.csv`` (path, label, fold); returns the manifest path.

    Folds are assigned round-robin within each class so they stay stratified.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    clips = tonal_clips(n_per_class, n_classes, seed=seed, **kwargs)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "fold"])
        for clip in clips:
            rel = Path("audio") / f"{clip.source_id}.wav"
            save_wav(out / rel, clip)
            idx = int(clip.source_id.rsplit("_", 1)[1])
            writer.writerow([rel.as_posix(), clip.label, idx % n_folds + 1])
    return manifest


def toy_images(kind: int, n: int, shape=(32, 64), rng=None) -> np.ndarray:
    """Two easily separable image families in [-1, 1], shape (n, 1, h, w).

    kind 0 draws a horizontal band at a random row, kind 1 a vertical band at
    a random column, both over low-level Gaussian noise.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = shape
    out = np.empty((n, 1, h, w))
    for i in range(n):
        img = rng.normal(0.0, 0.1, (h, w))
        if kind == 0:
            r = int(rng.integers(h // 5, h - h // 5))
            img[max(0, r - 2):r + 2, :] += 1.5
        else:
            c = int(rng.integers(w // 8, w - w // 8))
            img[:, max(0, c - 3):c + 3] += 1.5
        out[i, 0] = np.clip(img * 0.8 - 0.6, -1.0, 1.0)
    return out
