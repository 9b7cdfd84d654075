"""Non-learned preprocessing baselines: Gaussian blur and difference-of-Gaussians bandpass."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .ncc import ncc_fft


@dataclass(frozen=True)
class BandpassConfig:
    """DoG sigmas in full-resolution pixels."""

    sigma_low: float
    sigma_high: float

    def __post_init__(self):
        if not (0 < self.sigma_low < self.sigma_high):
            raise ValueError(
                f"need 0 < sigma_low < sigma_high, got {self.sigma_low}, {self.sigma_high}"
            )


@dataclass
class LabeledPair:
    """Template/source crops at working resolution and the true peak location (x, y)."""

    template: np.ndarray
    source: np.ndarray
    truth_loc: tuple[float, float]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at ``ceil(3 sigma)``, reflected borders."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def bandpass(img: np.ndarray, cfg: BandpassConfig, downsample_factor: int = 1) -> np.ndarray:
    """Difference of Gaussians; sigmas are divided by ``downsample_factor``."""
    lo = cfg.sigma_low / downsample_factor
    hi = cfg.sigma_high / downsample_factor
    return gaussian_blur(img, lo) - gaussian_blur(img, hi)


def select_config(
    sigma_grid: Iterable[tuple[float, float]],
    count_false: Callable[[BandpassConfig], int],
) -> tuple[BandpassConfig, dict[BandpassConfig, int]]:
    """Pick the grid point with the fewest false matches.

    Ties go to the smaller ``sigma_high``, then the smaller ``sigma_low``.
    """
    configs = [BandpassConfig(float(lo), float(hi)) for lo, hi in sigma_grid]
    if not configs:
        raise ValueError("empty sigma grid")
    counts = {cfg: count_false(cfg) for cfg in configs}
    best = min(configs, key=lambda c: (counts[c], c.sigma_high, c.sigma_low))
    return best, counts


def count_false_matches(
    pairs: Sequence[LabeledPair],
    preprocess: Callable[[np.ndarray], np.ndarray],
    radius: float,
) -> int:
    false = 0
    for p in pairs:
        corr = ncc_fft(preprocess(p.template), preprocess(p.source))
        v, u = np.unravel_index(int(np.argmax(corr)), corr.shape)
        if math.hypot(u - p.truth_loc[0], v - p.truth_loc[1]) > radius:
            false += 1
    return false


def tune_bandpass(
    labeled_pairs: Sequence[LabeledPair],
    sigma_grid: Iterable[tuple[float, float]],
    radius: float = 10.0,
    downsample_factor: int = 3,
) -> BandpassConfig:
    """Grid-search the DoG sigmas that minimize false matches on labeled pairs.

    A match is false when the correlogram argmax lies farther than ``radius``
    (working-resolution pixels) from the pair's true peak location.
    """
    if not labeled_pairs:
        raise ValueError("no labeled pairs to tune on")
    best, _ = select_config(
        sigma_grid,
        lambda cfg: count_false_matches(
            labeled_pairs, lambda img: bandpass(img, cfg, downsample_factor), radius
        ),
    )
    return best
