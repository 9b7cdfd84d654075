"""End-to-end acceptance checks. Each test prints one pass/fail line."""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from siamese_ncc import convnet, trainer
from siamese_ncc.convnet import NetConfig
from siamese_ncc.harness import evaluation
from siamese_ncc.harness.benchmark import BenchmarkConfig, run_benchmark
from siamese_ncc.harness.matching import Condition, GridSpec, MatchConfig, make_grid, match_pair
from siamese_ncc.harness.synth import SynthSpec, generate_stack
from siamese_ncc.ncc import ncc_direct, ncc_fft, ncc_peak_gradients


@pytest.fixture(scope="session")
def bench():
    cfg = BenchmarkConfig()
    t0 = time.perf_counter()
    res = run_benchmark(cfg)
    return cfg, res, time.perf_counter() - t0


def test_criterion_1_fft_matches_direct(criterion):
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst = {}
    for th, sh in ((8, 32), (16, 64), (160, 512)):
        err = 0.0
        for _ in range(100):
            t, s = rng.random((th, th)), rng.random((sh, sh))
            err = max(err, float(np.max(np.abs(ncc_fft(t, s) - ncc_direct(t, s)))))
        worst[(th, sh)] = err
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and elapsed < 120
    assert criterion(ok, f"max |fft - direct| {max(worst.values()):.2e} (limit 1e-5), {elapsed:.0f} s (limit 120 s)")


def test_criterion_2_affine_invariance(criterion):
    rng = np.random.default_rng(200)
    worst = 0.0
    for _ in range(20):
        t, s = rng.random((12, 12)), rng.random((40, 40))
        base = ncc_fft(t, s, out_dtype=np.float64)
        a, b = rng.uniform(0.01, 100), rng.uniform(-50, 50)
        c, d = rng.uniform(0.01, 100), rng.uniform(-50, 50)
        for tt, ss in ((a * t + b, s), (t, c * s + d), (a * t + b, c * s + d)):
            worst = max(worst, float(np.max(np.abs(ncc_fft(tt, ss, out_dtype=np.float64) - base))))
            worst = max(worst, float(np.max(np.abs(ncc_fft(tt, ss) - ncc_fft(t, s)))))
            worst = max(worst, float(np.max(np.abs(
                ncc_direct(tt, ss, out_dtype=np.float64) - ncc_direct(t, s, out_dtype=np.float64)))))
    assert criterion(worst <= 1e-6, f"max correlogram change {worst:.2e} (limit 1e-6)")


def _fd_peak(t, s, h=1e-5):
    # a 1e-3 step leaves an O(h^2) truncation term near 3e-4 on small entries
    corr = ncc_direct(t, s, out_dtype=np.float64)
    v, u = np.unravel_index(np.argmax(corr), corr.shape)
    g = ncc_peak_gradients(t, s, [(int(u), int(v))])[0]
    th, tw = t.shape
    worst = 0.0
    cells = [(t, g.grad_template, idx) for idx in np.ndindex(t.shape)]
    cells += [(s, g.grad_source, (v + i, u + j)) for i in range(th) for j in range(tw)]
    for arr, grad, idx in cells:
        orig = arr[idx]
        arr[idx] = orig + h
        fp = ncc_direct(t, s, out_dtype=np.float64)[v, u]
        arr[idx] = orig - h
        fm = ncc_direct(t, s, out_dtype=np.float64)[v, u]
        arr[idx] = orig
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-6))
    return worst


def _fd_chain(seed, h=1e-5):
    cfg = NetConfig(levels=1, base_channels=2, seed=seed)
    p = convnet.init(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed)
    src = rng.random((16, 16))
    tpl = src[4:12, 5:13] + 0.2 * rng.random((8, 8))

    def loss():
        t = convnet.forward(p, tpl)[0]
        s = convnet.forward(p, src)[0]
        return trainer.gap_loss(ncc_direct(t, s, out_dtype=np.float64), 3)

    t_out, ta = convnet.forward(p, tpl)
    s_out, sa = convnet.forward(p, src)
    _, gcorr, peaks = trainer.gap_loss(ncc_direct(t_out, s_out, out_dtype=np.float64), 3)
    gt, gs = trainer.correlogram_input_grads(t_out, s_out, gcorr)
    grads = [a + b for a, b in zip(convnet.backward(p, ta, gt)[0].tensors, convnet.backward(p, sa, gs)[0].tensors)]
    worst = 0.0
    for t, g in zip(p.tensors, grads):
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + h
            lp, _, pp = loss()
            t[idx] = orig - h
            lm, _, pm = loss()
            t[idx] = orig
            if not (pp.primary_loc == pm.primary_loc == peaks.primary_loc
                    and pp.secondary_loc == pm.secondary_loc == peaks.secondary_loc):
                raise AssertionError("peak moved under perturbation")
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
    return worst


def test_criterion_3_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(300)
    peak_err = 0.0
    for k in range(50):
        th = 8 if k % 2 else 16
        peak_err = max(peak_err, _fd_peak(rng.random((th, th)), rng.random((th + 6, th + 6))))
    chain_err = max(_fd_chain(seed) for seed in range(3))
    elapsed = time.perf_counter() - t0
    ok = peak_err <= 1e-4 and chain_err <= 1e-3 and elapsed < 300
    assert criterion(ok, f"peak-gradient rel err {peak_err:.2e} (limit 1e-4), chain rel err {chain_err:.2e} "
                         f"(limit 1e-3), {elapsed:.0f} s (limit 300 s)")


def test_criterion_4_training_efficacy(criterion, bench):
    cfg, res, _ = bench
    a, b = res.held_out_initial, res.held_out_final
    ok = (cfg.train.max_iters <= 2000 and b["similar_r_delta"] > a["similar_r_delta"]
          and b["dissimilar_r_max"] < a["dissimilar_r_max"] and res.timings["train"] < 1800)
    assert criterion(ok, f"similar r_delta {a['similar_r_delta']:.3f} -> {b['similar_r_delta']:.3f}, "
                         f"permuted r_max {a['dissimilar_r_max']:.3f} -> {b['dissimilar_r_max']:.3f} "
                         f"after {cfg.train.max_iters} iterations in {res.timings['train']:.0f} s")


def test_criterion_5_condition_ordering(criterion, bench):
    _, res, _ = bench
    # counts per pairing, summed over both template sizes; the per-size split is reported too
    counts, split = {}, {}
    for r in res.records:
        if r.label != "false":
            continue
        exp = evaluation.experiment_of(r)
        pairing = exp.split("-")[0]
        counts.setdefault(pairing, dict.fromkeys(("convnet", "bandpass", "raw"), 0))[r.condition] += 1
        split.setdefault(exp, dict.fromkeys(("convnet", "bandpass", "raw"), 0))[r.condition] += 1
    for pairing in ("adjacent", "across"):
        counts.setdefault(pairing, dict.fromkeys(("convnet", "bandpass", "raw"), 0))
    ok = all(c["convnet"] <= c["bandpass"] <= c["raw"] and c["convnet"] < c["raw"] for c in counts.values())
    fmt = lambda c: f"{c['convnet']}/{c['bandpass']}/{c['raw']}"  # noqa: E731
    detail = "; ".join(f"{e} {fmt(c)}" for e, c in sorted(counts.items()))
    per_size = ", ".join(f"{e} {fmt(c)}" for e, c in sorted(split.items()))
    assert criterion(ok, f"false matches convnet/bandpass/raw: {detail} (by template size: {per_size})")


def test_criterion_6_rejection_efficiency(criterion, bench):
    _, res, _ = bench
    by = {c: [r for r in res.records if r.condition == c] for c in ("convnet", "bandpass")}
    conv_thr, conv_frac = evaluation.zero_error_rejection(by["convnet"], "r_delta")
    bp_thr, bp_frac = evaluation.zero_error_rejection(by["bandpass"], "r_delta")
    (pt,) = evaluation.rejection_curve(by["convnet"], "r_delta", [conv_thr])
    monotone = True
    for recs in by.values():
        fr = [p.true_rejected for p in evaluation.rejection_curve(recs, "r_delta", np.linspace(0, 1, 201))]
        monotone &= all(x <= y for x, y in zip(fr, fr[1:]))
    ok = pt.error_rate == 0 and conv_frac < bp_frac and monotone
    assert criterion(ok, f"zero-error r_delta threshold rejects {100 * conv_frac:.2f}% of true convnet matches "
                         f"vs {100 * bp_frac:.2f}% for bandpass; curves monotone: {monotone}")


def _run_cli(args, cwd):
    r = subprocess.run([sys.executable, "-m", "siamese_ncc.cli", "--threads", "1", "--seed", "5", *args],
                       cwd=cwd, capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    return r.stdout


def _snapshot(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and not p.name.endswith(".timing.json")}


def test_criterion_7_determinism(criterion, tmp_path):
    snaps = []
    for run in range(2):
        d = tmp_path / f"run{run}"
        d.mkdir()
        _run_cli(["gen", "--spec", '{"size": 384}', "--sections", "3", "--out", "stack"], d)
        _run_cli(["train", "--data", "stack", "--net", '{"levels": 2, "base_channels": 4}',
                  "--train", '{"max_iters": 5, "batch_size": 4}', "--out", "net.ncw"], d)
        for cond in ("raw", "convnet"):
            _run_cli(["match", "--pair", "stack/section_000.f32", "stack/section_001.f32", "--condition", cond,
                      "--ckpt", "net.ncw", "--grid", '{"edge": 60}',
                      "--match", '{"template_size": 32, "source_size": 80}', "--out", f"{cond}.csv"], d)
        snaps.append(_snapshot(d))
    same = snaps[0].keys() == snaps[1].keys() and all(snaps[0][k] == snaps[1][k] for k in snaps[0])
    assert criterion(same, f"{len(snaps[0])} artifacts from gen/train/match byte-identical across two runs: {same}")


def test_criterion_8_performance(criterion):
    rng = np.random.default_rng(800)
    t, s = rng.random((160, 160)), rng.random((512, 512))
    with threadpool_limits(limits=1):
        t_fft = min(_timed(lambda: ncc_fft(t, s)) for _ in range(3))
        t_dir = min(_timed(lambda: ncc_direct(t, s)) for _ in range(2))
        stack = generate_stack(SynthSpec(), 2, seed=801)
        params = convnet.init(NetConfig())
        nodes = make_grid((1536, 1536), GridSpec(edge=90, margin=126))[:100]
        t0 = time.perf_counter()
        recs = match_pair(stack.sections[0], stack.sections[1], nodes, Condition("convnet", params=params),
                          MatchConfig(template_size=44, source_size=80))
        t_match = time.perf_counter() - t0
    speedup = t_dir / t_fft
    ok = speedup >= 5 and len(recs) == 100 and t_match < 60
    assert criterion(ok, f"ncc_fft {speedup:.1f}x faster than ncc_direct at (160, 512) (limit 5x); "
                         f"100-node convnet match_pair {t_match:.1f} s (limit 60 s)")


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0
