"""The standard synthetic benchmark: train, tune, match and label every condition.

A training stack supplies crops for the network and ground truth for bandpass
tuning; a separate test stack is matched under raw, bandpass and convnet
preprocessing for adjacent (i, i+1) and across (i, i+2) section pairs at two
template sizes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import convnet, trainer
from ..preprocess import BandpassConfig, select_config
from ..raster import downsample
from .evaluation import flag_neighbor_outliers
from .matching import Condition, GridSpec, MatchConfig, label_records, make_grid, match_prepared, prepare_section
from .synth import Stack, SynthSpec, generate_stack

log = logging.getLogger(__name__)

EXPERIMENTS = {"adjacent": 1, "across": 2}


@dataclass
class BenchmarkConfig:
    spec: SynthSpec = field(default_factory=SynthSpec)
    train_sections: int = 6
    test_sections: int = 5
    train_seed: int = 10
    test_seed: int = 20
    factor: int = 3
    template_sizes: tuple[int, ...] = (32, 44)
    source_size: int = 80
    exclusion: int = 5
    tolerance: float = 10.0
    grid_edge: float = 90.0
    bandpass_grid: tuple[tuple[float, float], ...] = (
        (0.75, 4.0), (1.0, 4.0), (1.0, 6.0), (1.0, 8.0), (1.5, 6.0), (1.5, 8.0),
        (1.5, 12.0), (2.0, 8.0), (2.0, 12.0), (3.0, 12.0), (2.5, 25.0), (4.0, 16.0),
    )
    net: convnet.NetConfig = field(default_factory=convnet.NetConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig.desk)
    held_out_batches: int = 4

    @property
    def margin(self) -> int:
        return (self.source_size // 2 + 2) * self.factor


@dataclass
class BenchmarkResult:
    records: list
    bandpass: dict
    params: convnet.NetParams
    history: list
    held_out_initial: dict
    held_out_final: dict
    timings: dict


def _labeled_matches(stack: Stack, prepared, gap: int, nodes, mcfg: MatchConfig, condition: str,
                     tolerance: float, experiment: str):
    records = []
    for i in range(len(stack.sections) - gap):
        j = i + gap
        recs = match_prepared(prepared[i], prepared[j], nodes, mcfg, condition,
                              pair_id=f"{experiment}-{mcfg.template_size}:{i}-{j}")
        truth = stack.displacement(i, j, [r.node[0] for r in recs], [r.node[1] for r in recs])
        label_records(recs, truth, tolerance)
        records += recs
    return records


def tune_bandpass_on_stack(stack: Stack, cfg: BenchmarkConfig, gap: int) -> tuple[BandpassConfig, dict]:
    """Pick the DoG sigmas with the fewest false matches on a labeled stack."""
    nodes = make_grid((cfg.spec.size, cfg.spec.size), GridSpec(cfg.grid_edge, cfg.margin))
    mcfg = MatchConfig(min(cfg.template_sizes), cfg.source_size, cfg.factor, cfg.exclusion)

    def count(bp: BandpassConfig) -> int:
        cond = Condition("bandpass", bp)
        prepared = [prepare_section(s, cond, cfg.factor) for s in stack.sections]
        recs = _labeled_matches(stack, prepared, gap, nodes, mcfg, "bandpass", cfg.tolerance, "tune")
        return sum(r.label == "false" for r in recs)

    return select_config(cfg.bandpass_grid, count)


def run_benchmark(cfg: BenchmarkConfig, params: Optional[convnet.NetParams] = None) -> BenchmarkResult:
    timings = {}
    t0 = time.perf_counter()
    train_stack = generate_stack(cfg.spec, cfg.train_sections, cfg.train_seed)
    test_stack = generate_stack(cfg.spec, cfg.test_sections, cfg.test_seed)
    timings["generate"] = time.perf_counter() - t0

    train_ds = [downsample(s.astype(np.float64), cfg.factor).astype(np.float32) for s in train_stack.sections]
    test_ds = [downsample(s.astype(np.float64), cfg.factor).astype(np.float32) for s in test_stack.sections]
    held_out = trainer.held_out_pairs(test_ds, cfg.train, cfg.held_out_batches, seed=cfg.test_seed)
    init_params = convnet.init(cfg.net)
    held_initial = trainer.evaluate(init_params, held_out, cfg.train.exclusion_train)

    t0 = time.perf_counter()
    history = []
    if params is None:
        params, history = trainer.train(train_ds, cfg.net, cfg.train, params=init_params)
    timings["train"] = time.perf_counter() - t0
    held_final = trainer.evaluate(params, held_out, cfg.train.exclusion_train)

    t0 = time.perf_counter()
    bandpass = {exp: tune_bandpass_on_stack(train_stack, cfg, gap)[0] for exp, gap in EXPERIMENTS.items()}
    timings["tune"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    nodes = make_grid((cfg.spec.size, cfg.spec.size), GridSpec(cfg.grid_edge, cfg.margin))
    records = []
    conditions = {
        "raw": {exp: Condition("raw") for exp in EXPERIMENTS},
        "bandpass": {exp: Condition("bandpass", bandpass[exp]) for exp in EXPERIMENTS},
        "convnet": {exp: Condition("convnet", params=params) for exp in EXPERIMENTS},
    }
    for name, per_exp in conditions.items():
        cache = {}
        for exp, gap in EXPERIMENTS.items():
            cond = per_exp[exp]
            key = (cond.kind, cond.bandpass)
            if key not in cache:
                cache[key] = [prepare_section(s, cond, cfg.factor) for s in test_stack.sections]
            for tsz in cfg.template_sizes:
                mcfg = MatchConfig(tsz, cfg.source_size, cfg.factor, cfg.exclusion)
                records += _labeled_matches(test_stack, cache[key], gap, nodes, mcfg, name,
                                            cfg.tolerance, exp)
    groups = {}
    for r in records:
        groups.setdefault((r.condition, r.pair_id), []).append(r)
    for recs in groups.values():
        for r, f in zip(recs, flag_neighbor_outliers(recs, 1.5 * cfg.grid_edge)):
            r.flagged = f
    timings["match"] = time.perf_counter() - t0
    log.info("benchmark timings %s", timings)
    return BenchmarkResult(records, bandpass, params, history, held_initial, held_final, timings)
