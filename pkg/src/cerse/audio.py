"""Mono waveform container and 16-bit PCM WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000
_PCM_FULL_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono time-domain signal, amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path: str | Path, expected_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Load a mono 16-bit PCM WAV. Any other rate, width, or channel count is rejected."""
    rate, data = wavfile.read(str(path))
    if rate != expected_rate:
        raise ValueError(
            f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resampling not supported)"
        )
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    return Waveform(data.astype(np.float64) / _PCM_FULL_SCALE, rate)


def write_wav(path: str | Path, wave: Waveform) -> None:
    """Write a waveform as mono 16-bit PCM, clipping to full scale."""
    clipped = np.clip(wave.samples, -1.0, 1.0 - 1.0 / _PCM_FULL_SCALE)
    pcm = np.round(clipped * _PCM_FULL_SCALE).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, pcm)
