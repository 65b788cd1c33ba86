"""STFT analysis/synthesis, time-frequency masking, and row-wise spectrogram normalization.

Spectrogram matrices are laid out (frequency bins, frames). The normalization
scheme removes per-band power bias: each frequency row of the noisy magnitude
spectrogram is centered and scaled to unit standard deviation, and the same
per-row scale is reused for the clean reference of the same utterance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import Waveform

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis framing. hop = fft_size/2 keeps the Hann window overlap-add exact."""

    fft_size: int = 512
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop <= 0:
            raise ValueError("fft_size and hop must be positive")
        if self.hop > self.fft_size:
            raise ValueError(f"hop {self.hop} exceeds fft_size {self.fft_size}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class Spectrogram:
    """(F x N) time-frequency matrix plus the framing it was produced with.

    ``num_samples`` records the source waveform length so synthesis can trim
    the overlap-add output back to it exactly.
    """

    values: np.ndarray
    kind: str  # "complex" or "magnitude"
    config: StftConfig
    sample_rate: int = 16000
    num_samples: int | None = None

    def __post_init__(self):
        if self.kind not in ("complex", "magnitude"):
            raise ValueError(f"unknown spectrogram kind {self.kind!r}")
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"expected 2-D values, got shape {values.shape}")
        if values.shape[0] != self.config.num_bins:
            raise ValueError(
                f"{values.shape[0]} rows does not match config ({self.config.num_bins} bins)"
            )
        if self.kind == "magnitude" and np.any(values < 0):
            raise ValueError("magnitude spectrogram has negative entries")
        object.__setattr__(self, "values", values)

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Per-frequency-row standard deviations, floored at SIGMA_FLOOR."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim != 1:
            raise ValueError("sigma must be a 1-D vector")
        if np.any(sigma < SIGMA_FLOOR):
            raise ValueError(f"sigma entries must be >= {SIGMA_FLOOR}")
        object.__setattr__(self, "sigma", sigma)


@lru_cache(maxsize=8)
def _hann_periodic(size: int) -> np.ndarray:
    n = np.arange(size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)


def frame_count(num_samples: int, config: StftConfig) -> int:
    """Frames produced by stft() for a signal of the given length."""
    return 1 + math.ceil(num_samples / config.hop)


def stft(wave: Waveform, config: StftConfig) -> Spectrogram:
    """Forward STFT with half-window centering. Returns a complex (F x N) spectrogram."""
    x = wave.samples
    if len(x) < config.fft_size:
        raise ValueError(
            f"waveform of {len(x)} samples is shorter than one frame ({config.fft_size})"
        )
    pad = config.fft_size // 2
    n_frames = frame_count(len(x), config)
    total = config.fft_size + (n_frames - 1) * config.hop
    padded = np.zeros(total)
    padded[pad : pad + len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.fft_size)[:: config.hop]
    spec = np.fft.rfft(frames * _hann_periodic(config.fft_size), axis=1).T
    return Spectrogram(spec, "complex", config, wave.sample_rate, num_samples=len(x))


def istft(spec: Spectrogram, config: StftConfig | None = None) -> Waveform:
    """Inverse STFT by windowed overlap-add, trimmed back to the source length."""
    if spec.kind != "complex":
        raise ValueError("istft requires a complex spectrogram (magnitude has no phase)")
    if config is not None and config != spec.config:
        raise ValueError(f"config mismatch: {config} vs spectrogram's {spec.config}")
    cfg = spec.config
    window = _hann_periodic(cfg.fft_size)
    frames = np.fft.irfft(spec.values.T, n=cfg.fft_size, axis=1)
    total = cfg.fft_size + (spec.num_frames - 1) * cfg.hop
    out = np.zeros(total)
    weight = np.zeros(total)
    for t in range(spec.num_frames):
        start = t * cfg.hop
        out[start : start + cfg.fft_size] += frames[t] * window
        weight[start : start + cfg.fft_size] += window**2
    out /= np.maximum(weight, 1e-12)
    pad = cfg.fft_size // 2
    if spec.num_samples is not None:
        out = out[pad : pad + spec.num_samples]
    else:
        out = out[pad : total - pad]
    return Waveform(out, spec.sample_rate)


def magnitude(spec: Spectrogram) -> Spectrogram:
    """Magnitude view of a spectrogram (identity if already magnitude)."""
    if spec.kind == "magnitude":
        return spec
    return Spectrogram(
        np.abs(spec.values), "magnitude", spec.config, spec.sample_rate, spec.num_samples
    )


def _check_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match spectrogram {shape}")
    if np.any(mask < 0.0) or np.any(mask > 1.0):
        raise ValueError("mask entries must lie in [0, 1]")
    return mask


def apply_mask(spec: Spectrogram, mask: np.ndarray) -> Spectrogram:
    """Elementwise gain: scales magnitudes bin by bin, leaving phase untouched."""
    mask = _check_mask(mask, spec.values.shape)
    return Spectrogram(
        spec.values * mask, spec.kind, spec.config, spec.sample_rate, spec.num_samples
    )


def synthesize_enhanced(noisy: Spectrogram, mask: np.ndarray) -> Waveform:
    """Enhanced waveform: masked noisy magnitude recombined with the noisy phase."""
    if noisy.kind != "complex":
        raise ValueError("synthesis needs the complex noisy spectrogram for its phase")
    return istft(apply_mask(noisy, mask))


def waveform_from_magnitude(mag: np.ndarray, phase_source: Spectrogram) -> Waveform:
    """Rebuild audio from an arbitrary magnitude matrix and another spectrogram's phase.

    Bins where the phase source is zero fall back to zero phase.
    """
    if phase_source.kind != "complex":
        raise ValueError("phase source must be a complex spectrogram")
    mag = np.asarray(mag, dtype=np.float64)
    if mag.shape != phase_source.values.shape:
        raise ValueError(f"magnitude shape {mag.shape} does not match phase source")
    ref_mag = np.abs(phase_source.values)
    safe = np.where(ref_mag > 0, ref_mag, 1.0)
    phase = np.where(ref_mag > 0, phase_source.values / safe, 1.0)
    return istft(Spectrogram(mag * phase, "complex", phase_source.config,
                             phase_source.sample_rate, phase_source.num_samples))


def center_rows(values: np.ndarray) -> np.ndarray:
    """Remove each frequency row's mean across frames."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError("row centering needs a 2-D matrix with at least 2 frames")
    return values - values.mean(axis=1, keepdims=True)


def row_std(centered: np.ndarray) -> NormStats:
    """Per-row population standard deviation of a row-centered matrix, floored."""
    centered = np.asarray(centered, dtype=np.float64)
    sigma = np.sqrt(np.mean(centered**2, axis=1))
    return NormStats(np.maximum(sigma, SIGMA_FLOOR))


def normalize_full(values: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Zero-mean, unit-std rows. Returns the normalized matrix and the row scales."""
    centered = center_rows(values)
    stats = row_std(centered)
    return centered / stats.sigma[:, None], stats


def normalize_std(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Divide each row by its scale, without centering.

    The scales must come from the noisy spectrogram of the utterance; the clean
    reference is divided by those same scales so both live on one grid.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != len(stats.sigma):
        raise ValueError(
            f"matrix with {values.shape[0]} rows does not match {len(stats.sigma)} scales"
        )
    return values / stats.sigma[:, None]
