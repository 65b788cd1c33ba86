"""Time and frequency masking on magnitude spectrograms (SpecAugment-style)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    num_freq_masks: int = 1
    max_freq_width: int = 15
    num_time_masks: int = 1
    max_time_width: int = 40
    fill: str = "zero"

    def __post_init__(self):
        if min(self.num_freq_masks, self.num_time_masks) < 0:
            raise ValueError("mask counts must be non-negative")
        if min(self.max_freq_width, self.max_time_width) < 0:
            raise ValueError("mask widths must be non-negative")
        if self.fill != "zero":
            raise ValueError(f"unsupported fill {self.fill!r}")


def apply_specaugment(mag: np.ndarray, config: AugmentConfig, rng_seed: int) -> np.ndarray:
    """Zero out randomly placed frequency bands and time blocks.

    Each mask draws a width uniformly from [0, max_width] and a start position
    uniformly over valid placements. Fully deterministic given the seed.
    """
    mag = np.asarray(mag)
    if mag.ndim != 2:
        raise ValueError(f"expected 2-D magnitude matrix, got shape {mag.shape}")
    num_rows, num_cols = mag.shape
    if config.num_freq_masks and config.max_freq_width >= num_rows:
        raise ValueError(f"max_freq_width {config.max_freq_width} must be < {num_rows} rows")
    if config.num_time_masks and config.max_time_width >= num_cols:
        raise ValueError(f"max_time_width {config.max_time_width} must be < {num_cols} frames")
    rng = np.random.default_rng(rng_seed)
    out = mag.copy()
    for _ in range(config.num_freq_masks):
        width = int(rng.integers(0, config.max_freq_width + 1))
        start = int(rng.integers(0, num_rows - width + 1))
        out[start : start + width, :] = 0.0
    for _ in range(config.num_time_masks):
        width = int(rng.integers(0, config.max_time_width + 1))
        start = int(rng.integers(0, num_cols - width + 1))
        out[:, start : start + width] = 0.0
    return out
