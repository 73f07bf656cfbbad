"""Audio loading, resampling, pitch shifting and 1D dataset augmentation."""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PITCH_FACTORS = (0.75, 0.9, 1.15, 1.5)

N_FFT = 1024
HOP = 256
SINC_TAPS = 32
KAISER_BETA = 8.6


class AudioError(Exception):
    pass


class WavFormatError(AudioError):
    """Malformed RIFF/WAV header or payload."""


class UnsupportedEncodingError(AudioError):
    """Valid WAV, but not 8/16-bit integer PCM."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: Optional[str] = None
    source_id: str = ""
    shift_factor: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def clip_id(self) -> str:
        return f"{self.source_id}__t{self.shift_factor:g}"


def load_wav(path, label=None, source_id=None) -> AudioClip:
    """Read an 8/16-bit PCM WAV file, downmixing stereo by channel averaging."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from exc
        raise WavFormatError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    else:
        raise UnsupportedEncodingError(f"{path}: {8 * width}-bit samples not supported")
    usable = data.size - data.size % n_channels
    data = data[:usable].reshape(-1, n_channels).mean(axis=1)
    if data.size == 0:
        raise WavFormatError(f"{path}: no audio frames")
    return AudioClip(data, rate, label=label, source_id=source_id if source_id is not None else path.stem)


def save_wav(path, clip: AudioClip) -> None:
    """Write a mono 16-bit PCM WAV."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def _sinc_resample(x: np.ndarray, ratio: float, n_out: int) -> np.ndarray:
    """Band-limited interpolation at positions k/ratio with a Kaiser-windowed sinc."""
    half = SINC_TAPS // 2
    cutoff = min(1.0, ratio)
    pos = np.arange(n_out) / ratio
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-half + 1, half + 1)
    idx = base[:, None] + offsets[None, :]
    dist = pos[:, None] - idx
    window = np.kaiser(2 * half + 1, KAISER_BETA)
    # continuous Kaiser window evaluated at the fractional distance
    w = np.interp(dist, np.arange(-half, half + 1), window)
    taps = cutoff * np.sinc(cutoff * dist) * w
    padded = np.concatenate([np.zeros(half), x, np.zeros(half + 1)])
    vals = padded[np.clip(idx + half, 0, padded.size - 1)]
    return (vals * taps).sum(axis=1)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return replace(clip, samples=clip.samples.copy())
    ratio = target_rate / clip.sample_rate
    n_out = max(1, int(round(clip.samples.size * ratio)))
    y = np.clip(_sinc_resample(clip.samples, ratio, n_out), -1.0, 1.0)
    return replace(clip, samples=y, sample_rate=int(target_rate))


def _stft(x: np.ndarray) -> np.ndarray:
    pad = N_FFT // 2
    xp = np.pad(x, (pad, pad + N_FFT))
    n_frames = 1 + (xp.size - N_FFT) // HOP
    frames = np.lib.stride_tricks.sliding_window_view(xp, N_FFT)[::HOP][:n_frames]
    return np.fft.rfft(frames * np.hanning(N_FFT + 1)[:-1], axis=1).T


def _istft(spec: np.ndarray, length: int) -> np.ndarray:
    window = np.hanning(N_FFT + 1)[:-1]
    frames = np.fft.irfft(spec.T, n=N_FFT, axis=1) * window
    n = N_FFT + HOP * (frames.shape[0] - 1)
    out = np.zeros(n)
    norm = np.zeros(n)
    for i, frame in enumerate(frames):
        out[i * HOP:i * HOP + N_FFT] += frame
        norm[i * HOP:i * HOP + N_FFT] += window ** 2
    out /= np.where(norm > 1e-8, norm, 1.0)
    pad = N_FFT // 2
    y = out[pad:pad + length]
    return np.pad(y, (0, length - y.size))


def time_stretch(x: np.ndarray, rate: float, length: int) -> np.ndarray:
    """Phase-vocoder time stretch; ``rate`` > 1 shortens. Output has ``length`` samples."""
    spec = _stft(x)
    steps = np.arange(0, spec.shape[1], rate)
    omega = np.linspace(0, np.pi * HOP, spec.shape[0])
    padded = np.pad(spec, ((0, 0), (0, 2)))
    phase = np.angle(padded[:, 0])
    out = np.zeros((spec.shape[0], steps.size), dtype=np.complex128)
    for t, step in enumerate(steps):
        k = int(step)
        frac = step - k
        c0, c1 = padded[:, k], padded[:, k + 1]
        mag = (1 - frac) * np.abs(c0) + frac * np.abs(c1)
        out[:, t] = mag * np.exp(1j * phase)
        dphase = np.angle(c1) - np.angle(c0) - omega
        dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
        phase = phase + omega + dphase
    return _istft(out, length)


def pitch_shift(clip: AudioClip, t: float) -> AudioClip:
    """Scale every frequency by ``t`` while keeping the duration.

    The signal is resampled by 1/t (which also changes the duration by 1/t)
    and then stretched back to the original length with a phase vocoder.
    """
    if not t > 0:
        raise ValueError(f"pitch factor must be positive, got {t}")
    n = clip.samples.size
    if t == 1.0:
        return replace(clip, samples=clip.samples.copy(), shift_factor=1.0)
    n_short = max(1, int(round(n / t)))
    shifted = _sinc_resample(clip.samples, 1.0 / t, n_short)
    stretched = time_stretch(shifted, n_short / n, n)
    return replace(clip, samples=np.clip(stretched, -1.0, 1.0), shift_factor=float(t))


def augment_dataset(clips: Sequence[AudioClip], factors: Sequence[float],
                    failures: Optional[list] = None) -> list[AudioClip]:
    """Originals followed by one pitch-shifted copy per factor.

    Clips that fail to shift are skipped and logged; pass ``failures`` to
    collect ``(source_id, factor, exception)`` tuples.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("at least one pitch factor is required")
    if any(not f > 0 for f in factors):
        raise ValueError("pitch factors must be positive")
    if any(f == 1.0 for f in factors):
        raise ValueError("factor 1.0 would duplicate the originals")
    out = list(clips)
    for clip in clips:
        for f in factors:
            try:
                out.append(pitch_shift(clip, f))
            except Exception as exc:  # noqa: BLE001 - reported, not fatal
                logger.warning("pitch shift %s by %g failed: %s", clip.source_id, f, exc)
                if failures is not None:
                    failures.append((clip.source_id, f, exc))
    return out


def augmented_count(n_clips: int, n_factors: int) -> int:
    return n_clips * (1 + n_factors)
