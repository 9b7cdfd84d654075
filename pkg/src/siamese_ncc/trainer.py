"""Weakly supervised correlation-gap training of the siamese preprocessing net.

Each iteration runs two phases on one batch of template/source crops that are
known to match somewhere. The similar phase widens the gap between the primary
correlogram peak and the best value outside an exclusion box around it. The
dissimilar phase re-pairs the same crops by a derangement and lowers the
primary peak. Each phase ends with its own Adam step unless ``combined_step``
is set.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import convnet
from .ncc import PeakAnalysis, analyze_peaks, ncc_fft, ncc_peak_gradients
from .raster import PatchSpec, crop, rotate90

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "gap_loss", "dissim_loss", "mean_r_max", "mean_r_delta", "grad_norm")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 0.0005
    max_iters: int = 2000
    exclusion_train: int = 20
    template_size: int = 160
    source_size: int = 512
    seed: int = 0
    pair_gap: int = 1
    clip_norm: float = 10.0
    combined_step: bool = False
    separate_moments: bool = False
    dissimilar_weight: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so a derangement exists")
        if self.exclusion_train < 1:
            raise ValueError("exclusion_train must be >= 1")
        if not self.template_size < self.source_size:
            raise ValueError("template_size must be smaller than source_size")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Crop sizes and budget scaled for a single CPU core.

        The dissimilar phase is weighted up so that the permuted-pair peak keeps
        falling while the gap grows; at 1:1 it drifts upward at these sizes.
        """
        base = dict(template_size=32, source_size=64, exclusion_train=7, max_iters=600, dissimilar_weight=1.4)
        base.update(overrides)
        return cls(**base)


@dataclass
class PairSample:
    template: np.ndarray
    source: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: convnet.NetParams) -> "OptimState":
        return cls([np.zeros_like(t) for t in params.tensors], [np.zeros_like(t) for t in params.tensors])


# -- losses -------------------------------------------------------------------

def gap_loss(corr: np.ndarray, exclusion: int) -> tuple[float, np.ndarray, PeakAnalysis]:
    """Negative correlation gap and its subgradient with respect to the correlogram."""
    peaks = analyze_peaks(corr, exclusion)
    grad = np.zeros(corr.shape)
    x, y = peaks.primary_loc
    grad[y, x] -= 1.0
    if peaks.secondary_found:
        sx, sy = peaks.secondary_loc
        grad[sy, sx] += 1.0
    return -(peaks.r_max - peaks.r_second), grad, peaks


def dissimilar_loss(corr: np.ndarray) -> tuple[float, np.ndarray, tuple[int, int]]:
    """Height of the primary peak; gradient +1 at the peak only."""
    corr = np.asarray(corr)
    if corr.ndim != 2 or corr.size == 0:
        raise ValueError("correlogram must be a non-empty 2D array")
    y, x = np.unravel_index(int(np.argmax(corr)), corr.shape)
    grad = np.zeros(corr.shape)
    grad[y, x] = 1.0
    return float(corr[y, x]), grad, (int(x), int(y))


def correlogram_input_grads(template, source, grad_corr) -> tuple[np.ndarray, np.ndarray]:
    """Chain a sparse correlogram gradient back onto the NCC inputs."""
    ys, xs = np.nonzero(grad_corr)
    gt = np.zeros(np.shape(template))
    gs = np.zeros(np.shape(source))
    locs = [(int(x), int(y)) for x, y in zip(xs, ys)]
    for pg in ncc_peak_gradients(template, source, locs):
        c = grad_corr[pg.loc[1], pg.loc[0]]
        gt += c * pg.grad_template
        gs += c * pg.grad_source
    return gt, gs


# -- optimizer ----------------------------------------------------------------

def adam_step(params: convnet.NetParams, grads: convnet.NetParams, state: OptimState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if len(grads.tensors) != len(params.tensors) or len(state.m) != len(params.tensors):
        raise ValueError("parameter, gradient and state layouts differ")
    step = state.step + 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors, grads.tensors, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p.append((p - update).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return convnet.NetParams(params.cfg, new_p), OptimState(new_m, new_v, step)


def global_norm(grads: convnet.NetParams) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.tensors))


def _scale(grads: convnet.NetParams, s: float) -> convnet.NetParams:
    return convnet.NetParams(grads.cfg, [(g * s).astype(g.dtype) for g in grads.tensors])


def _add(a: convnet.NetParams, b: convnet.NetParams) -> convnet.NetParams:
    return convnet.NetParams(a.cfg, [x + y for x, y in zip(a.tensors, b.tensors)])


# -- batches ------------------------------------------------------------------

def _rotated_offset(x: int, y: int, span: int, k: int) -> tuple[int, int]:
    # top-left corner of an inner square after k counterclockwise turns of the outer one
    for _ in range(k):
        x, y = y, span - x
    return x, y


def make_batch(dataset: Sequence[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> list[PairSample]:
    """Sample matching template/source crops from sections ``i`` and ``i + pair_gap``.

    The template's offset inside the source window is uniform over all
    placements, so the true peak is spread evenly over the correlogram.
    """
    if len(dataset) <= cfg.pair_gap:
        raise ValueError(f"need more than {cfg.pair_gap} sections, got {len(dataset)}")
    h, w = np.shape(dataset[0])
    S, T = cfg.source_size, cfg.template_size
    if h < S or w < S:
        raise ValueError(f"sections {h}x{w} smaller than source size {S}")
    span = S - T
    batch = []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(0, len(dataset) - cfg.pair_gap))
        sx, sy = int(rng.integers(0, w - S + 1)), int(rng.integers(0, h - S + 1))
        ox, oy = int(rng.integers(0, span + 1)), int(rng.integers(0, span + 1))
        k = int(rng.integers(0, 4))
        tpl = rotate90(crop(dataset[i], PatchSpec(sx + ox, sy + oy, T)), k)
        src = rotate90(crop(dataset[i + cfg.pair_gap], PatchSpec(sx, sy, S)), k)
        prov = dict(
            template_section=i, source_section=i + cfg.pair_gap, source_xy=(sx, sy),
            offset=(ox, oy), template_rotation=k, source_rotation=k,
            peak=_rotated_offset(ox, oy, span, k),
        )
        batch.append(PairSample(tpl, src, prov))
    return batch


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def permute_batch(batch: Sequence[PairSample], rng: np.random.Generator) -> list[PairSample]:
    """Re-pair every template with another pair's source (no pair keeps its own)."""
    perm = derangement(len(batch), rng)
    out = []
    for i, j in enumerate(perm):
        prov = dict(batch[i].provenance, source_from=int(j))
        out.append(PairSample(batch[i].template, batch[int(j)].source, prov))
    return out


# -- training -----------------------------------------------------------------

def _phase(params, templates, sources, similar: bool, exclusion: int):
    """Loss and parameter gradient for one phase, averaged over the batch."""
    t_out, t_acts = convnet.forward(params, templates)
    s_out, s_acts = convnet.forward(params, sources)
    n = len(templates)
    if not (np.isfinite(t_out).all() and np.isfinite(s_out).all()):
        return params.zeros_like(), dict(loss=float("nan"), r_max=float("nan"), r_delta=float("nan"))
    gt = np.zeros(t_out.shape)
    gs = np.zeros(s_out.shape)
    losses, r_max, r_delta = [], [], []
    for b in range(n):
        corr = ncc_fft(t_out[b], s_out[b], out_dtype=np.float64)
        if similar:
            loss, gcorr, peaks = gap_loss(corr, exclusion)
            r_max.append(peaks.r_max)
            r_delta.append(peaks.r_delta)
        else:
            loss, gcorr, _ = dissimilar_loss(corr)
            r_max.append(loss)
        losses.append(loss)
        gt[b], gs[b] = correlogram_input_grads(t_out[b], s_out[b], gcorr)
    gp_t, _ = convnet.backward(params, t_acts, gt / n)
    gp_s, _ = convnet.backward(params, s_acts, gs / n)
    stats = dict(loss=float(np.mean(losses)), r_max=float(np.mean(r_max)),
                 r_delta=float(np.mean(r_delta)) if r_delta else float("nan"))
    return _add(gp_t, gp_s), stats


def _clip(grads, clip_norm, iteration):
    norm = global_norm(grads)
    if clip_norm and norm > clip_norm:
        log.info("iteration %d: clipping gradient norm %.3g to %g", iteration, norm, clip_norm)
        grads = _scale(grads, clip_norm / norm)
    return grads, norm


def train(
    dataset: Sequence[np.ndarray],
    net_cfg: convnet.NetConfig,
    cfg: TrainConfig,
    params: Optional[convnet.NetParams] = None,
    log_path=None,
    checkpoint_dir=None,
) -> tuple[convnet.NetParams, list[dict]]:
    """Alternate similar and permuted-dissimilar updates for ``cfg.max_iters`` iterations."""
    rng = np.random.default_rng(cfg.seed)
    params = convnet.init(net_cfg) if params is None else params
    state = OptimState.zeros(params)
    # the dissimilar phase keeps its own Adam moments unless they are shared
    state_dis = OptimState.zeros(params) if cfg.separate_moments else state
    history = []
    for it in range(cfg.max_iters):
        batch = make_batch(dataset, cfg, rng)
        perm = permute_batch(batch, rng)
        templates = np.stack([p.template for p in batch])
        sources = np.stack([p.source for p in batch])
        psources = np.stack([p.source for p in perm])

        g_sim, sim = _phase(params, templates, sources, True, cfg.exclusion_train)
        if not np.isfinite(sim["loss"]):
            raise TrainingError(f"non-finite gap loss at iteration {it}; batch {[p.provenance for p in batch]}")
        g_sim, norm = _clip(g_sim, cfg.clip_norm, it)
        if cfg.combined_step:
            g_dis, dis = _phase(params, templates, psources, False, cfg.exclusion_train)
            g_dis, _ = _clip(_scale(g_dis, cfg.dissimilar_weight), cfg.clip_norm, it)
            params, state = adam_step(params, _add(g_sim, g_dis), state, cfg.lr)
        else:
            params, state = adam_step(params, g_sim, state, cfg.lr)
            if not cfg.separate_moments:
                state_dis = state
            g_dis, dis = _phase(params, templates, psources, False, cfg.exclusion_train)
            g_dis, _ = _clip(_scale(g_dis, cfg.dissimilar_weight), cfg.clip_norm, it)
            params, state_dis = adam_step(params, g_dis, state_dis, cfg.lr)
            if not cfg.separate_moments:
                state = state_dis
        if not np.isfinite(dis["loss"]):
            raise TrainingError(f"non-finite dissimilar loss at iteration {it}; batch {[p.provenance for p in perm]}")

        row = dict(iteration=it, gap_loss=sim["loss"], dissim_loss=dis["loss"],
                   mean_r_max=sim["r_max"], mean_r_delta=sim["r_delta"], grad_norm=norm)
        history.append(row)
        if cfg.checkpoint_every and checkpoint_dir is not None and (it + 1) % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            convnet.save_checkpoint(params, Path(checkpoint_dir) / f"ckpt_{it + 1:06d}.ncw")
    if log_path is not None:
        write_log(history, log_path)
    return params, history


def write_log(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def held_out_pairs(dataset: Sequence[np.ndarray], cfg: TrainConfig, n_batches: int, seed: int):
    """Fixed evaluation batches and their permuted counterparts."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        batch = make_batch(dataset, cfg, rng)
        out.append((batch, permute_batch(batch, rng)))
    return out


def evaluate(params: convnet.NetParams, pairs, exclusion: int) -> dict:
    """Mean similar-pair r_delta / r_max and mean permuted-pair r_max."""
    r_delta, r_max, r_max_perm = [], [], []
    for batch, perm in pairs:
        t_out = convnet.forward(params, np.stack([p.template for p in batch]))[0]
        s_out = convnet.forward(params, np.stack([p.source for p in batch]))[0]
        order = [p.provenance["source_from"] for p in perm]
        for b in range(len(batch)):
            peaks = analyze_peaks(ncc_fft(t_out[b], s_out[b]), exclusion)
            r_delta.append(peaks.r_delta)
            r_max.append(peaks.r_max)
            r_max_perm.append(float(ncc_fft(t_out[b], s_out[order[b]]).max()))
    return dict(similar_r_delta=float(np.mean(r_delta)), similar_r_max=float(np.mean(r_max)),
                dissimilar_r_max=float(np.mean(r_max_perm)))


def config_dict(net_cfg: convnet.NetConfig, cfg: TrainConfig) -> dict:
    return dict(net=asdict(net_cfg), train=asdict(cfg))
