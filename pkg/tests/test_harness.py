import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siamese_ncc.harness import evaluation
from siamese_ncc.harness.matching import (
    Condition, GridSpec, MatchConfig, MatchRecord, label_records, make_grid, match_pair,
)
from siamese_ncc.harness.synth import SynthSpec, generate_stack, true_displacement
from siamese_ncc.preprocess import BandpassConfig

SMALL = MatchConfig(template_size=32, source_size=80)


def rec(node=(0, 0), disp=(0.0, 0.0), r_max=0.5, r_delta=0.2, label="true", cond="raw", pair="adjacent:0-1"):
    return MatchRecord(node, disp, r_max, r_delta, cond, pair, label=label)


# -- synthetic stacks ---------------------------------------------------------

def test_clean_stack_is_static():
    st_ = generate_stack(SynthSpec.clean(size=96), 3, seed=1)
    assert all(np.array_equal(st_.sections[0], s) for s in st_.sections[1:])
    d = st_.displacement(0, 2, [10, 50], [20, 70])
    assert not d.any()


def test_pure_translation_ground_truth():
    st_ = generate_stack(SynthSpec.clean(size=96, translation=(5.0, -3.0)), 3, seed=2)
    d = st_.displacement(0, 1, [10, 40, 80], [10, 50, 90])
    assert np.allclose(d, [[5, -3]] * 3, atol=1e-9)
    assert np.allclose(st_.displacement(0, 2, [40], [40]), [[10, -6]], atol=1e-9)


def test_generation_reproducible():
    spec = SynthSpec(size=128)
    a, b = generate_stack(spec, 2, seed=3), generate_stack(spec, 2, seed=3)
    for x, y in zip(a.sections + a.warps, b.sections + b.warps):
        assert x.tobytes() == y.tobytes()
    c = generate_stack(spec, 2, seed=4)
    assert c.sections[0].tobytes() != a.sections[0].tobytes()
    assert a.sections[0].dtype == np.float32 and 0 <= a.sections[0].min() and a.sections[0].max() <= 1


def test_warp_smooth_and_invertible():
    st_ = generate_stack(SynthSpec(size=256, deformation=12.0, deformation_wavelength=200.0), 3, seed=5)
    for u in st_.warps[1:]:
        dxx = np.gradient(u[0], axis=1)
        dyy = np.gradient(u[1], axis=0)
        dxy = np.gradient(u[0], axis=0)
        dyx = np.gradient(u[1], axis=1)
        det = (1 + dxx) * (1 + dyy) - dxy * dyx
        assert det.min() > 0.5
        assert np.abs(np.diff(u, axis=2)).max() < 1.0


def test_true_displacement_round_trip():
    st_ = generate_stack(SynthSpec(size=256, deformation=10.0, deformation_wavelength=200.0), 2, seed=6)
    x, y = np.array([60.0, 128.0, 190.0]), np.array([70.0, 128.0, 150.0])
    d = true_displacement(st_.warps[0], st_.warps[1], x, y)
    back = true_displacement(st_.warps[1], st_.warps[0], x + d[:, 0], y + d[:, 1])
    assert np.allclose(back, -d, atol=0.05)


def test_spec_dict_round_trip():
    spec = SynthSpec(size=200, translation=(1.0, 2.0))
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        generate_stack(spec, 0, seed=0)


# -- grid ---------------------------------------------------------------------

def test_grid_small_section():
    assert make_grid((10, 10), GridSpec(edge=100)) == [(5, 5)]
    assert make_grid((10, 10), GridSpec(edge=100, margin=5)) == []
    assert make_grid((0, 0), GridSpec(edge=10)) == []
    with pytest.raises(ValueError):
        GridSpec(edge=0)


def test_grid_lattice_geometry():
    nodes = make_grid((1000, 1000), GridSpec(edge=100, margin=50))
    assert all(50 <= x <= 949 and 50 <= y <= 949 for x, y in nodes)
    rows = sorted({y for _, y in nodes})
    assert all(abs((b - a) - 100 * math.sqrt(3) / 2) <= 1 for a, b in zip(rows, rows[1:]))
    r0 = sorted(x for x, y in nodes if y == rows[0])
    r1 = sorted(x for x, y in nodes if y == rows[1])
    assert all(b - a == 100 for a, b in zip(r0, r0[1:]))
    assert min(abs(a - b) for a in r0 for b in r1) == 50


def test_grid_area_scaling():
    n1 = len(make_grid((4000, 4000), GridSpec(edge=100)))
    n2 = len(make_grid((4000, 4000), GridSpec(edge=200)))
    assert 4 * 0.8 <= n1 / n2 <= 4 * 1.2


# -- matching -----------------------------------------------------------------

def test_self_match_identity():
    sec = generate_stack(SynthSpec(size=480), 1, seed=7).sections[0]
    nodes = make_grid(sec.shape[::-1], GridSpec(edge=120, margin=126))
    recs = match_pair(sec, sec, nodes, Condition("raw"), SMALL)
    assert len(recs) == len(nodes) > 0
    for r in recs:
        assert r.displacement == (0.0, 0.0)
        assert r.r_max == pytest.approx(1.0, abs=1e-5)


def test_translation_recovered():
    st_ = generate_stack(SynthSpec.clean(size=480, translation=(12.0, -6.0)), 2, seed=8)
    nodes = make_grid((480, 480), GridSpec(edge=120, margin=126))
    for cond in (Condition("raw"), Condition("bandpass", BandpassConfig(2, 12))):
        recs = match_pair(st_.sections[0], st_.sections[1], nodes, cond, SMALL)
        for r in recs:
            assert abs(r.displacement[0] - 12) <= 3 and abs(r.displacement[1] + 6) <= 3


def test_skipped_nodes_reported():
    sec = np.random.default_rng(0).random((300, 300))
    skipped = []
    recs = match_pair(sec, sec, [(150, 150), (10, 10)], Condition("raw"), SMALL, skipped=skipped)
    assert [r.node for r in recs] == [(150, 150)]
    assert skipped and skipped[0][0] == (10, 10)


def test_occluded_template_has_low_r_delta():
    spec = SynthSpec(size=600, occlusions=0)
    st_ = generate_stack(spec, 2, seed=9)
    a = st_.sections[0].copy()
    nodes = make_grid((600, 600), GridSpec(edge=90, margin=126))
    cx, cy = min(nodes, key=lambda n: math.hypot(n[0] - 300, n[1] - 300))
    yy, xx = np.mgrid[0:600, 0:600]
    # the disk covers the whole 96 px template footprint around the chosen node
    occ = np.hypot(xx - cx, yy - cy) < 75
    rng = np.random.default_rng(1)
    a[occ] = 0.12 + rng.normal(0, 0.04, occ.sum())
    recs = match_pair(a, st_.sections[1], nodes, Condition("raw"), SMALL)
    truth = st_.displacement(0, 1, [r.node[0] for r in recs], [r.node[1] for r in recs])
    label_records(recs, truth)
    inside = [r for r in recs if r.node == (cx, cy)]
    matched = [r.r_delta for r in recs if r.label == "true" and r not in inside]
    assert inside
    assert max(r.r_delta for r in inside) < np.median(matched)


def test_defect_free_pairs_are_mostly_true():
    spec = SynthSpec(size=1024, brightness_amplitude=0.0, occlusions=0, noise_sigma=0.0)
    st_ = generate_stack(spec, 2, seed=12)
    nodes = make_grid((1024, 1024), GridSpec(edge=90, margin=126))
    recs = match_pair(st_.sections[0], st_.sections[1], nodes, Condition("raw"),
                      MatchConfig(template_size=44, source_size=80))
    label_records(recs, st_.displacement(0, 1, [r.node[0] for r in recs], [r.node[1] for r in recs]))
    assert sum(r.label == "true" for r in recs) / len(recs) >= 0.99


def test_label_records():
    recs = [rec(disp=(3, 4)), rec(disp=(30, 0)), rec()]
    label_records(recs, [(0, 0), (0, 0), None])
    assert [r.label for r in recs] == ["true", "false", "unknown"]
    assert recs[0].norm == 5 and recs[0].truth == (0.0, 0.0)


def test_condition_validation():
    with pytest.raises(ValueError):
        Condition("median")
    with pytest.raises(ValueError):
        Condition("bandpass")
    with pytest.raises(ValueError):
        Condition("convnet")


# -- neighbour screening ------------------------------------------------------

def lattice_records(disp=(5.0, -2.0)):
    nodes = make_grid((1000, 1000), GridSpec(edge=100, margin=50))
    return [rec(node=n, disp=disp) for n in nodes]


def test_flags_uniform_and_single_outlier():
    recs = lattice_records()
    assert not any(evaluation.flag_neighbor_outliers(recs, 110))
    recs[40].displacement = (205.0, -2.0)
    flags = evaluation.flag_neighbor_outliers(recs, 110)
    assert [i for i, f in enumerate(flags) if f] == [40]
    assert not any(evaluation.flag_neighbor_outliers(recs, 110, threshold=math.inf))


def test_flags_need_three_neighbours():
    recs = [rec(node=(0, 0), disp=(500, 0)), rec(node=(100, 0)), rec(node=(200, 0))]
    assert evaluation.flag_neighbor_outliers(recs, 150) == [False, False, False]
    assert evaluation.flag_neighbor_outliers([], 10) == []


@settings(max_examples=20, deadline=None)
@given(st.randoms(use_true_random=False))
def test_flags_permutation_invariant(rnd):
    recs = lattice_records()
    g = np.random.default_rng(rnd.randint(0, 1000))
    for i in g.choice(len(recs), 6, replace=False):
        recs[i].displacement = tuple(g.normal(0, 80, 2))
    base = dict(zip(map(id, recs), evaluation.flag_neighbor_outliers(recs, 110)))
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    assert all(base[id(r)] == f for r, f in zip(shuffled, evaluation.flag_neighbor_outliers(shuffled, 110)))


# -- rejection curves and summaries -------------------------------------------

def test_rejection_curve_examples():
    recs = [rec(r_delta=0.9), rec(r_delta=0.8), rec(r_delta=0.04, label="false"), rec(r_delta=0.5)]
    (p,) = evaluation.rejection_curve(recs, "r_delta", [0.05])
    assert p.true_rejected == 0 and p.error_rate == 0 and p.kept == 3
    low, high = evaluation.rejection_curve(recs, "r_delta", [-1.0, 5.0])
    assert low.true_rejected == 0 and low.error_rate == 0.25
    assert high.true_rejected == 1 and high.error_rate == 0 and high.degenerate and high.kept == 0
    (n,) = evaluation.rejection_curve([rec(disp=(30, 40)), rec(disp=(1, 0))], "norm", [10])
    assert n.true_rejected == 0.5
    with pytest.raises(ValueError):
        evaluation.rejection_curve([rec(label="unknown")], "r_max", [0])
    with pytest.raises(ValueError):
        evaluation.rejection_curve(recs, "bogus", [0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=40),
       st.sampled_from(["r_max", "r_delta"]))
def test_rejection_curve_monotone(vals, crit):
    recs = [rec(r_max=v, r_delta=v, label="true" if t else "false") for v, t in vals]
    pts = evaluation.rejection_curve(recs, crit, np.linspace(-0.1, 1.1, 25))
    fr = [p.true_rejected for p in pts]
    assert all(a <= b for a, b in zip(fr, fr[1:]))


def test_zero_error_rejection():
    recs = [rec(r_delta=0.9), rec(r_delta=0.3), rec(r_delta=0.2, label="false"), rec(r_delta=0.1)]
    thr, frac = evaluation.zero_error_rejection(recs)
    assert thr > 0.2 and frac == pytest.approx(1 / 3)
    (p,) = evaluation.rejection_curve(recs, "r_delta", [thr])
    assert p.error_rate == 0 and p.true_rejected == pytest.approx(frac)
    assert evaluation.zero_error_rejection([rec()]) == (-math.inf, 0.0)


def test_summarize_partition_and_histograms():
    rng = np.random.default_rng(0)
    recs = [rec(disp=tuple(rng.normal(0, 20, 2)), r_max=float(rng.uniform(-1, 1)), r_delta=float(rng.uniform(0, 1)),
                label=rng.choice(["true", "false"]), cond=c, pair=f"{e}:0-1")
            for c in ("raw", "convnet") for e in ("adjacent", "across") for _ in range(25)]
    recs.append(rec(label="unknown", cond="raw", pair="adjacent:0-1"))
    out = evaluation.summarize(recs, bins=10)
    assert len(out["groups"]) == 4
    for g in out["groups"]:
        assert g["true"] + g["false"] == g["total"] == 25
        for h in g["histograms"].values():
            assert sum(h["true"]) + sum(h["false"]) == 25
    raw_adj = [g for g in out["groups"] if g["condition"] == "raw" and g["experiment"] == "adjacent"][0]
    assert raw_adj["unknown"] == 1
    assert evaluation.summarize([rec(), rec()])["groups"][0]["error_pct"] == 0


def test_records_csv_round_trip(tmp_path):
    recs = [rec(node=(3, 4), disp=(6.0, -3.0), r_max=0.123456789, r_delta=0.01, label="false"),
            rec(node=(9, 9), cond="convnet", pair="across:2-4")]
    recs[1].flagged = True
    path = tmp_path / "r.csv"
    evaluation.write_records(recs, path)
    assert path.read_text().splitlines()[0] == ",".join(evaluation.RECORD_COLUMNS)
    back = evaluation.read_records(path)
    for a, b in zip(recs, back):
        assert (a.node, a.displacement, a.r_max, a.r_delta, a.label, a.flagged, a.condition, a.pair_id) == \
               (b.node, b.displacement, b.r_max, b.r_delta, b.label, b.flagged, b.condition, b.pair_id)
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        evaluation.read_records(path)
