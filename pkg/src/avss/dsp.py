"""Waveform <-> complex spectrogram transforms and complex ratio masks.

The STFT reflect-pads by half a window, applies a periodic Hann analysis
window, and keeps the one-sided spectrum.  The inverse applies the same
window again and normalizes by the overlap-added squared window, which gives
perfect reconstruction for any hop that satisfies the constant-overlap-add
check performed at config construction.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputTooShort, ShapeMismatch

MASK_EPS = 1e-8


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or len(self.samples) == 0:
            raise ConfigError("waveform must be a non-empty 1-d array")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def hann_window(length):
    """Periodic Hann window."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 8000
    fft_size: int = 256
    win_length: int = 256
    hop: int = 64

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if not (0 < self.hop <= self.win_length <= self.fft_size):
            raise ConfigError(
                f"need 0 < hop <= win_length <= fft_size, got "
                f"hop={self.hop} win={self.win_length} fft={self.fft_size}"
            )
        # constant-overlap-add of the squared window (analysis+synthesis pair)
        w2 = hann_window(self.win_length) ** 2
        span = np.zeros(self.win_length * 4)
        for start in range(0, len(span) - self.win_length + 1, self.hop):
            span[start : start + self.win_length] += w2
        steady = span[self.win_length : len(span) - 2 * self.win_length]
        if steady.size == 0 or steady.min() <= 0 or (
            steady.max() - steady.min()
        ) > 1e-8 * steady.max():
            raise ConfigError(
                f"window/hop pair (win={self.win_length}, hop={self.hop}) "
                "does not satisfy the constant-overlap-add condition"
            )

    @property
    def freq_bins(self):
        return self.fft_size // 2 + 1

    @property
    def pad(self):
        return self.win_length // 2

    def frame_count(self, num_samples):
        padded = num_samples + 2 * self.pad
        return (padded - self.win_length) // self.hop + 1


@dataclass
class ComplexSpectrogram:
    """One-sided complex time-frequency grid, freq_bins x frames."""

    data: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ShapeMismatch(f"spectrogram must be 2-d, got {self.data.shape}")
        if self.data.shape[0] != self.config.freq_bins:
            raise ShapeMismatch(
                f"spectrogram has {self.data.shape[0]} rows, "
                f"config implies {self.config.freq_bins}"
            )

    @property
    def real(self):
        return self.data.real

    @property
    def imag(self):
        return self.data.imag

    @property
    def shape(self):
        return self.data.shape


@dataclass
class ComplexMask:
    """Complex ratio mask; `clip_bound` bounds each cell (see producers).

    The ideal mask clips the complex magnitude to `clip_bound`; the network
    head bounds real and imaginary parts separately, so cell magnitudes never
    exceed sqrt(2) * clip_bound.
    """

    data: np.ndarray
    clip_bound: float = 10.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-d, got {self.data.shape}")
        if self.clip_bound <= 0:
            raise ConfigError(f"clip_bound must be positive, got {self.clip_bound}")
        limit = self.clip_bound * np.sqrt(2.0) * (1 + 1e-9)
        peak = np.abs(self.data).max() if self.data.size else 0.0
        if peak > limit:
            raise ShapeMismatch(
                f"mask magnitude {peak:.4g} exceeds bound {limit:.4g}"
            )

    @property
    def real(self):
        return self.data.real

    @property
    def imag(self):
        return self.data.imag

    @property
    def shape(self):
        return self.data.shape


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    x = w.samples
    if len(x) < cfg.win_length:
        raise InputTooShort(
            f"signal of {len(x)} samples is shorter than one window ({cfg.win_length})"
        )
    xp = np.pad(x, cfg.pad, mode="reflect")
    n_frames = (len(xp) - cfg.win_length) // cfg.hop + 1
    frames = sliding_window_view(xp, cfg.win_length)[:: cfg.hop][:n_frames]
    frames = frames * hann_window(cfg.win_length)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1).T
    return ComplexSpectrogram(spec, cfg)


def istft(s: ComplexSpectrogram) -> Waveform:
    cfg = s.config
    n_frames = s.data.shape[1]
    frames = np.fft.irfft(s.data.T, n=cfg.fft_size, axis=1)[:, : cfg.win_length]
    window = hann_window(cfg.win_length)
    frames = frames * window

    total = (n_frames - 1) * cfg.hop + cfg.win_length
    buf = np.zeros(total)
    wsum = np.zeros(total)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    np.add.at(buf, idx, frames)
    np.add.at(wsum, idx, np.broadcast_to(window**2, frames.shape))
    buf /= np.maximum(wsum, 1e-12)
    out = buf[cfg.pad : total - cfg.pad]
    return Waveform(out, cfg.sample_rate)


def ideal_complex_mask(target: ComplexSpectrogram, mixture: ComplexSpectrogram,
                       clip_bound: float = 10.0) -> ComplexMask:
    """Cellwise target/mixture with a floored denominator and clipped magnitude."""
    if target.shape != mixture.shape:
        raise ShapeMismatch(
            f"target {target.shape} and mixture {mixture.shape} differ"
        )
    denom = np.maximum(np.abs(mixture.data), MASK_EPS)
    mask = target.data * np.conj(mixture.data) / (denom * denom)
    mag = np.abs(mask)
    over = mag > clip_bound
    if np.any(over):
        mask = np.where(over, mask * (clip_bound / np.maximum(mag, MASK_EPS)), mask)
    return ComplexMask(mask, clip_bound)


def apply_mask(mask: ComplexMask, mixture: ComplexSpectrogram) -> ComplexSpectrogram:
    if mask.shape != mixture.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs spectrogram {mixture.shape}")
    return ComplexSpectrogram(mask.data * mixture.data, mixture.config)


def apply_mask_tensors(mask_re, mask_im, mix_re, mix_im):
    """Differentiable complex multiply on tensor-backed real/imag grids."""
    out_re = mask_re * mix_re - mask_im * mix_im
    out_im = mask_re * mix_im + mask_im * mix_re
    return out_re, out_im


# ---------------------------------------------------------------------------
# WAV files: PCM 16-bit signed little-endian, mono
# ---------------------------------------------------------------------------


def write_wav(path, w: Waveform):
    scaled = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(scaled.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)
