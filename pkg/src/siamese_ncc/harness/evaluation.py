"""Match screening and error accounting: neighbour consensus, rejection curves, summaries."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .matching import MatchRecord

CRITERIA = ("norm", "r_max", "r_delta")
RECORD_COLUMNS = ("node_x", "node_y", "dx", "dy", "norm", "r_max", "r_delta",
                  "label", "flagged", "condition", "pair_id")


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    true_rejected: float
    error_rate: float
    kept: int
    degenerate: bool = False


def criterion_value(rec: MatchRecord, criterion: str) -> float:
    if criterion == "norm":
        return rec.norm
    if criterion == "r_max":
        return rec.r_max
    if criterion == "r_delta":
        return rec.r_delta
    raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


def flag_neighbor_outliers(records: Sequence[MatchRecord], radius: float, threshold: float = 50.0) -> list[bool]:
    """Flag matches whose displacement is far from the median of their grid neighbours.

    Neighbours are the other records whose nodes lie within ``radius``. Records
    with fewer than three neighbours are never flagged.
    """
    if not records:
        return []
    nodes = np.array([r.node for r in records], dtype=np.float64)
    disp = np.array([r.displacement for r in records], dtype=np.float64)
    flags = []
    for i in range(len(records)):
        d = np.hypot(*(nodes - nodes[i]).T)
        nb = (d <= radius)
        nb[i] = False
        if nb.sum() < 3:
            flags.append(False)
            continue
        med = np.median(disp[nb], axis=0)
        flags.append(bool(math.hypot(*(disp[i] - med)) > threshold))
    return flags


def _labeled(records: Sequence[MatchRecord]) -> None:
    bad = [r for r in records if r.label not in ("true", "false")]
    if bad:
        raise ValueError(f"{len(bad)} records lack a true/false label")


def rejection_curve(records: Sequence[MatchRecord], criterion: str, thresholds: Iterable[float]) -> list[CurvePoint]:
    """Fraction of true matches lost and residual error rate for each threshold.

    ``r_max`` and ``r_delta`` reject values below the threshold, ``norm`` rejects
    values above it. With nothing kept the error rate is reported as 0 and the
    point is marked degenerate.
    """
    _labeled(records)
    values = np.array([criterion_value(r, criterion) for r in records])
    is_true = np.array([r.label == "true" for r in records])
    n_true = int(is_true.sum())
    points = []
    for t in thresholds:
        keep = values <= t if criterion == "norm" else values >= t
        kept = int(keep.sum())
        rejected_true = int((is_true & ~keep).sum())
        false_kept = int((~is_true & keep).sum())
        points.append(CurvePoint(
            float(t),
            rejected_true / n_true if n_true else 0.0,
            false_kept / kept if kept else 0.0,
            kept,
            kept == 0,
        ))
    return points


def zero_error_rejection(records: Sequence[MatchRecord], criterion: str = "r_delta") -> tuple[float, float]:
    """Smallest-loss threshold that removes every false match.

    Returns ``(threshold, fraction of true matches rejected)``. For ``r_max`` and
    ``r_delta`` everything at or below the highest false value is rejected.
    """
    _labeled(records)
    if criterion == "norm":
        raise ValueError("zero_error_rejection supports r_max and r_delta")
    values = np.array([criterion_value(r, criterion) for r in records])
    is_true = np.array([r.label == "true" for r in records])
    if is_true.all():
        return -math.inf, 0.0
    worst = float(values[~is_true].max())
    threshold = float(np.nextafter(worst, math.inf))
    n_true = int(is_true.sum())
    lost = int((is_true & (values <= worst)).sum())
    return threshold, (lost / n_true if n_true else 0.0)


def experiment_of(rec: MatchRecord) -> str:
    """Experiment key: the part of ``pair_id`` before the first ``:``."""
    return rec.pair_id.split(":", 1)[0]


def _bin_edges(criterion: str, values: np.ndarray, bins: int) -> np.ndarray:
    if criterion == "r_max":
        return np.linspace(-1.0, 1.0, bins + 1)
    if criterion == "r_delta":
        return np.linspace(0.0, 2.0, bins + 1)
    top = float(values.max()) if values.size and values.max() > 0 else 1.0
    return np.linspace(0.0, top, bins + 1)


def summarize(records: Sequence[MatchRecord], bins: int = 40) -> dict:
    """Per condition and experiment: counts, error percentage and criterion histograms.

    Unlabeled records are excluded from the counts and reported separately.
    """
    groups = defaultdict(list)
    for r in records:
        groups[(r.condition, experiment_of(r))].append(r)
    out = []
    for (cond, exp), recs in sorted(groups.items()):
        labeled = [r for r in recs if r.label in ("true", "false")]
        n_false = sum(r.label == "false" for r in labeled)
        entry = dict(
            condition=cond, experiment=exp, total=len(labeled),
            true=len(labeled) - n_false, false=n_false,
            error_pct=100.0 * n_false / len(labeled) if labeled else 0.0,
            unknown=len(recs) - len(labeled), flagged=sum(r.flagged for r in recs),
            histograms={},
        )
        for c in CRITERIA:
            vals = np.array([criterion_value(r, c) for r in labeled])
            edges = _bin_edges(c, vals, bins)
            hist = {}
            for lab in ("true", "false"):
                sel = np.array([criterion_value(r, c) for r in labeled if r.label == lab])
                hist[lab] = np.histogram(sel, edges)[0].tolist()
            entry["histograms"][c] = dict(edges=edges.tolist(), **hist)
        out.append(entry)
    return dict(groups=out)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_records(records: Sequence[MatchRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.node[0], r.node[1], _fmt(r.displacement[0]), _fmt(r.displacement[1]),
                        _fmt(r.norm), _fmt(r.r_max), _fmt(r.r_delta), r.label, int(r.flagged),
                        r.condition, r.pair_id])


def read_records(path) -> list[MatchRecord]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            out.append(MatchRecord(
                node=(int(row["node_x"]), int(row["node_y"])),
                displacement=(float(row["dx"]), float(row["dy"])),
                r_max=float(row["r_max"]), r_delta=float(row["r_delta"]),
                condition=row["condition"], pair_id=row["pair_id"],
                label=row["label"], flagged=bool(int(row["flagged"])),
            ))
    return out
