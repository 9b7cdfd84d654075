"""Grid template matching between two sections under one preprocessing condition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import convnet
from ..ncc import analyze_peaks, ncc_fft
from ..preprocess import BandpassConfig, bandpass
from ..raster import downsample

CONDITIONS = ("raw", "bandpass", "convnet")


@dataclass(frozen=True)
class GridSpec:
    """Triangular lattice; ``edge`` and ``margin`` in full-resolution pixels."""

    edge: float = 400.0
    margin: int = 0

    def __post_init__(self):
        if not self.edge > 0:
            raise ValueError(f"grid edge must be > 0, got {self.edge}")


@dataclass(frozen=True)
class Condition:
    kind: str = "raw"
    bandpass: Optional[BandpassConfig] = None
    params: Optional[convnet.NetParams] = field(default=None, compare=False, hash=False)
    tile: int = 256
    overlap: int = 64

    def __post_init__(self):
        if self.kind not in CONDITIONS:
            raise ValueError(f"unknown condition {self.kind!r}; expected one of {CONDITIONS}")
        if self.kind == "bandpass" and self.bandpass is None:
            raise ValueError("bandpass condition needs a BandpassConfig")
        if self.kind == "convnet" and self.params is None:
            raise ValueError("convnet condition needs network parameters")


@dataclass(frozen=True)
class MatchConfig:
    """Crop sizes and peak-analysis window, in downsampled pixels."""

    template_size: int = 160
    source_size: int = 512
    factor: int = 3
    exclusion: int = 5


@dataclass
class MatchRecord:
    node: tuple[int, int]
    displacement: tuple[float, float]
    r_max: float
    r_delta: float
    condition: str
    pair_id: str = ""
    truth: Optional[tuple[float, float]] = None
    label: str = "unknown"
    flagged: bool = False

    @property
    def norm(self) -> float:
        return math.hypot(*self.displacement)


def make_grid(dims: tuple[int, int], spec: GridSpec) -> list[tuple[int, int]]:
    """Nodes ``(x, y)`` of a triangular lattice centered in the section.

    Rows are ``edge * sqrt(3) / 2`` apart and odd rows are shifted by ``edge / 2``.
    Coordinates are rounded half-up; nodes closer than ``margin`` to the border
    are dropped.
    """
    width, height = dims
    lo = spec.margin
    hi_x = width - 1 - spec.margin
    hi_y = height - 1 - spec.margin
    if hi_x < lo or hi_y < lo:
        return []
    dy = spec.edge * math.sqrt(3) / 2
    n_rows = int(math.floor((hi_y - lo) / dy)) + 1
    y0 = lo + ((hi_y - lo) - (n_rows - 1) * dy) / 2
    n_cols = int(math.floor((hi_x - lo) / spec.edge)) + 1
    x0 = lo + ((hi_x - lo) - (n_cols - 1) * spec.edge) / 2
    nodes = []
    for r in range(n_rows):
        y = math.floor(y0 + r * dy + 0.5)
        shift = spec.edge / 2 if r % 2 else 0.0
        for c in range(-1, n_cols + 1):
            x = math.floor(x0 + shift + c * spec.edge + 0.5)
            if lo <= x <= hi_x and lo <= y <= hi_y:
                nodes.append((x, y))
    return nodes


def prepare_section(section: np.ndarray, condition: Condition, factor: int = 3) -> np.ndarray:
    """Downsample a full-resolution section and apply the condition's preprocessing."""
    img = downsample(np.asarray(section, dtype=np.float64), factor)
    if condition.kind == "bandpass":
        return bandpass(img, condition.bandpass, factor)
    if condition.kind == "convnet":
        m = condition.params.cfg.multiple
        h, w = img.shape
        ph, pw = (-h) % m, (-w) % m
        padded = np.pad(img, ((0, ph), (0, pw)), mode="reflect") if ph or pw else img
        out = convnet.apply_full_image(condition.params, padded, condition.tile, condition.overlap)
        return np.asarray(out[:h, :w], dtype=np.float64)
    return img


def crop_origin(center: float, size: int) -> int:
    return int(math.floor(center - size / 2 + 0.5))


def match_prepared(
    template_img: np.ndarray,
    source_img: np.ndarray,
    nodes: Sequence[tuple[int, int]],
    cfg: MatchConfig,
    condition: str,
    pair_id: str = "",
    skipped: Optional[list] = None,
) -> list[MatchRecord]:
    """Match every node on already prepared (downsampled, filtered) sections."""
    f = cfg.factor
    h, w = source_img.shape
    records = []
    for x, y in nodes:
        cx, cy = x / f, y / f
        tx, ty = crop_origin(cx, cfg.template_size), crop_origin(cy, cfg.template_size)
        sx, sy = crop_origin(cx, cfg.source_size), crop_origin(cy, cfg.source_size)
        inside = (
            0 <= sx and 0 <= sy and sx + cfg.source_size <= w and sy + cfg.source_size <= h
            and 0 <= tx and 0 <= ty and tx + cfg.template_size <= template_img.shape[1]
            and ty + cfg.template_size <= template_img.shape[0]
        )
        if not inside:
            if skipped is not None:
                skipped.append(((x, y), "crop outside section"))
            continue
        tpl = template_img[ty:ty + cfg.template_size, tx:tx + cfg.template_size]
        src = source_img[sy:sy + cfg.source_size, sx:sx + cfg.source_size]
        peaks = analyze_peaks(ncc_fft(tpl, src), cfg.exclusion)
        px, py = peaks.primary_loc
        disp = (float((px - (tx - sx)) * f), float((py - (ty - sy)) * f))
        records.append(MatchRecord((x, y), disp, peaks.r_max, peaks.r_delta, condition, pair_id))
    return records


def match_pair(
    template_section: np.ndarray,
    source_section: np.ndarray,
    nodes: Sequence[tuple[int, int]],
    condition: Condition,
    cfg: MatchConfig = MatchConfig(),
    pair_id: str = "",
    skipped: Optional[list] = None,
) -> list[MatchRecord]:
    """Match templates cut around each node of one section into the other section.

    Displacements are reported in full-resolution pixels.
    """
    t = prepare_section(template_section, condition, cfg.factor)
    s = prepare_section(source_section, condition, cfg.factor)
    return match_prepared(t, s, nodes, cfg, condition.kind, pair_id, skipped)


def label_records(records: Sequence[MatchRecord], truths, tolerance: float = 10.0) -> None:
    """Attach ground truth and set ``label`` in place; ``truths`` aligns with ``records``."""
    for rec, truth in zip(records, truths):
        if truth is None:
            rec.truth, rec.label = None, "unknown"
            continue
        rec.truth = (float(truth[0]), float(truth[1]))
        err = math.hypot(rec.displacement[0] - truth[0], rec.displacement[1] - truth[1])
        rec.label = "false" if err > tolerance else "true"
