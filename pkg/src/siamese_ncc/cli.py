"""Command-line entry point: gen, train, match, eval, bench and selfcheck.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import convnet, trainer
from .harness import evaluation
from .harness.matching import CONDITIONS, Condition, GridSpec, MatchConfig, label_records, make_grid, match_pair
from .harness.synth import SynthSpec, generate_stack, true_displacement
from .ncc import ncc_direct, ncc_fft, ncc_peak_gradients
from .preprocess import BandpassConfig
from .raster import RasterFormatError, downsample, load_f32, load_pgm, save_f32, save_pgm

log = logging.getLogger("siamese_ncc")

SECTION_RE = re.compile(r"section_(\d+)\.f32$")
PAIR_RE = re.compile(r"^(?P<exp>[^:]*):(?P<i>\d+)-(?P<j>\d+)$")


class UsageError(Exception):
    pass


def build_id() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        from importlib.metadata import version
        return "v" + version("artifact")
    except Exception:
        return "unknown"


def _json_arg(text):
    """Inline JSON object or a path to a JSON file."""
    if text is None:
        return {}
    text = text.strip()
    if not text.startswith("{"):
        try:
            text = Path(text).read_text()
        except OSError as e:
            raise UsageError(f"cannot read JSON config {text!r}: {e}") from e
    try:
        val = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON: {e}") from e
    if not isinstance(val, dict):
        raise UsageError("JSON config must be an object")
    return val


def _build(factory, values: dict, what: str):
    try:
        if factory == SynthSpec.from_dict:
            return factory(values)
        return factory(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {what}: {e}") from e


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_manifest(path: Path, command: str, config: dict, seed: int, started: float) -> None:
    path.write_text(_dump(dict(build=build_id(), command=command, config=config, seed=seed)))
    # wall time lives in a sidecar so the manifest itself stays byte-reproducible
    timing = path.with_name(path.stem + ".timing.json")
    timing.write_text(_dump(dict(wall_seconds=time.perf_counter() - started)))


def _echo(command: str, config: dict, seed: int) -> None:
    sys.stdout.write(_dump(dict(command=command, config=config, seed=seed)))
    sys.stdout.flush()


def _section_files(data: Path) -> list[Path]:
    files = sorted((p for p in data.glob("section_*.f32") if SECTION_RE.search(p.name)),
                   key=lambda p: int(SECTION_RE.search(p.name).group(1)))
    return files


def _check_out_parent(path: Path) -> None:
    if not path.parent.is_dir():
        raise OSError(f"output directory {path.parent} does not exist")


# ---------------------------------------------------------------- gen

def cmd_gen(args, cfg: dict) -> int:
    started = time.perf_counter()
    spec = _build(SynthSpec.from_dict, {**cfg.get("spec", {}), **_json_arg(args.spec)}, "spec")
    if args.sections < 1:
        raise UsageError("--sections must be >= 1")
    config = dict(spec=spec.to_dict(), sections=args.sections)
    _echo("gen", config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stack = generate_stack(spec, args.sections, args.seed)
    for i, (sec, warp) in enumerate(zip(stack.sections, stack.warps)):
        save_f32(sec, out / f"section_{i:03d}.f32")
        save_f32(warp[0], out / f"warp_{i:03d}_dx.f32")
        save_f32(warp[1], out / f"warp_{i:03d}_dy.f32")
    _write_manifest(out / "manifest.json", "gen", config, args.seed, started)
    return 0


# ---------------------------------------------------------------- train

def cmd_train(args, cfg: dict) -> int:
    started = time.perf_counter()
    net_cfg = _build(convnet.NetConfig, {**cfg.get("net", {}), **_json_arg(args.net)}, "net config")
    train_over = {"seed": args.seed, **cfg.get("train", {}), **_json_arg(args.train)}
    train_cfg = _build(trainer.TrainConfig.desk, train_over, "train config")
    if args.factor < 1:
        raise UsageError("--factor must be >= 1")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    config = dict(net=asdict(net_cfg), train=asdict(train_cfg), factor=args.factor, data=str(args.data))
    _echo("train", config, args.seed)
    _check_out_parent(out)
    _check_out_parent(log_path)
    files = _section_files(Path(args.data))
    if len(files) < train_cfg.pair_gap + 1:
        raise OSError(f"{args.data}: need at least {train_cfg.pair_gap + 1} section_*.f32 files, found {len(files)}")
    dataset = [downsample(load_f32(p).astype(np.float64), args.factor).astype(np.float32) for p in files]
    init = None
    if args.init:
        init = convnet.load_checkpoint(args.init)
        if init.cfg != net_cfg:
            raise UsageError("--init checkpoint config differs from --net")
    params, history = trainer.train(dataset, net_cfg, train_cfg, params=init, log_path=log_path)
    convnet.save_checkpoint(params, out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "train", config, args.seed, started)
    return 0


# ---------------------------------------------------------------- match

def _default_pair_id(a: Path, b: Path, experiment: str) -> str:
    ma, mb = SECTION_RE.search(a.name), SECTION_RE.search(b.name)
    if ma and mb:
        return f"{experiment}:{int(ma.group(1))}-{int(mb.group(1))}"
    return f"{experiment}:{a.stem}-{b.stem}"


def cmd_match(args, cfg: dict) -> int:
    started = time.perf_counter()
    if args.condition == "convnet" and not args.ckpt:
        raise UsageError("--condition convnet requires --ckpt")
    mcfg = _build(MatchConfig, {**cfg.get("match", {}), **_json_arg(args.match)}, "match config")
    grid_over = {**cfg.get("grid", {}), **_json_arg(args.grid)}
    grid_over.setdefault("margin", (mcfg.source_size // 2 + 2) * mcfg.factor)
    grid = _build(GridSpec, grid_over, "grid")
    bp = None
    if args.condition == "bandpass":
        bp = _build(BandpassConfig, {"sigma_low": 2.0, "sigma_high": 12.0, **cfg.get("bandpass", {}),
                                     **_json_arg(args.bandpass)}, "bandpass config")
    a, b = Path(args.pair[0]), Path(args.pair[1])
    pair_id = args.pair_id or _default_pair_id(a, b, args.experiment)
    out = Path(args.out)
    config = dict(condition=args.condition, match=asdict(mcfg), grid=asdict(grid),
                  bandpass=asdict(bp) if bp else None, ckpt=args.ckpt, pair=[str(a), str(b)], pair_id=pair_id)
    _echo("match", config, args.seed)
    _check_out_parent(out)
    params = convnet.load_checkpoint(args.ckpt) if args.condition == "convnet" else None
    cond = Condition(args.condition, bp, params)
    ta, tb = load_f32(a), load_f32(b)
    if ta.shape != tb.shape:
        raise ValueError(f"section shapes differ: {ta.shape} vs {tb.shape}")
    nodes = make_grid((ta.shape[1], ta.shape[0]), grid)
    skipped = []
    records = match_pair(ta, tb, nodes, cond, mcfg, pair_id, skipped)
    for node, reason in skipped:
        log.warning("node %s skipped: %s", node, reason)
    evaluation.write_records(records, out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "match", config, args.seed, started)
    return 0


# ---------------------------------------------------------------- eval

def _load_warp(truth: Path, i: int):
    dx, dy = truth / f"warp_{i:03d}_dx.f32", truth / f"warp_{i:03d}_dy.f32"
    if not (dx.exists() and dy.exists()):
        return None
    return np.stack([load_f32(dx), load_f32(dy)])


def _attach_truth(records, truth: Path, tolerance: float) -> int:
    """Label records from stored warp fields; returns how many stay unknown."""
    groups = {}
    for r in records:
        groups.setdefault(r.pair_id, []).append(r)
    warps = {}
    unknown = 0
    for pid, recs in groups.items():
        m = PAIR_RE.match(pid)
        wa = wb = None
        if m:
            i, j = int(m.group("i")), int(m.group("j"))
            for k in (i, j):
                if k not in warps:
                    warps[k] = _load_warp(truth, k)
            wa, wb = warps[i], warps[j]
        if wa is None or wb is None:
            log.warning("no ground truth for pair %r; %d records left unknown", pid, len(recs))
            for r in recs:
                r.truth, r.label = None, "unknown"
            unknown += len(recs)
            continue
        t = true_displacement(wa, wb, [r.node[0] for r in recs], [r.node[1] for r in recs])
        label_records(recs, t, tolerance)
    return unknown


def _thresholds(criterion: str, records) -> np.ndarray:
    if criterion == "r_max":
        return np.round(np.linspace(-1.0, 1.0, 201), 10)
    if criterion == "r_delta":
        return np.round(np.linspace(0.0, 1.0, 201), 10)
    top = max([r.norm for r in records] + [1.0])
    return np.linspace(0.0, top, 201)


def cmd_eval(args, cfg: dict) -> int:
    started = time.perf_counter()
    if args.tolerance <= 0:
        raise UsageError("--tolerance must be > 0")
    out = Path(args.out)
    config = dict(records=str(args.records), truth=str(args.truth), tolerance=args.tolerance,
                  radius=args.radius, neighbor_threshold=args.neighbor_threshold)
    _echo("eval", config, args.seed)
    records = evaluation.read_records(args.records)
    truth = Path(args.truth)
    if not truth.is_dir():
        raise OSError(f"truth directory {truth} does not exist")
    unknown = _attach_truth(records, truth, args.tolerance)
    if args.radius > 0:
        by_pair = {}
        for r in records:
            by_pair.setdefault((r.condition, r.pair_id), []).append(r)
        for recs in by_pair.values():
            for r, f in zip(recs, evaluation.flag_neighbor_outliers(recs, args.radius, args.neighbor_threshold)):
                r.flagged = f
    out.mkdir(parents=True, exist_ok=True)
    summary = evaluation.summarize(records)
    labeled = [r for r in records if r.label in ("true", "false")]
    zero_error = []
    groups = {}
    for r in labeled:
        groups.setdefault((r.condition, evaluation.experiment_of(r)), []).append(r)
    with open(out / "rejection_curves.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["condition", "experiment", "criterion", "threshold", "true_rejected", "error_rate",
                    "kept", "degenerate"])
        for (cond, exp), recs in sorted(groups.items()):
            for crit in evaluation.CRITERIA:
                for p in evaluation.rejection_curve(recs, crit, _thresholds(crit, recs)):
                    w.writerow([cond, exp, crit, repr(p.threshold), repr(p.true_rejected), repr(p.error_rate),
                                p.kept, int(p.degenerate)])
            thr, frac = evaluation.zero_error_rejection(recs, "r_delta")
            zero_error.append(dict(condition=cond, experiment=exp, threshold=thr if math.isfinite(thr) else None,
                                   true_rejected=frac))
    with open(out / "histograms.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["condition", "experiment", "criterion", "bin_lo", "bin_hi", "true", "false"])
        for g in summary["groups"]:
            for crit, h in g["histograms"].items():
                e = h["edges"]
                for k in range(len(e) - 1):
                    w.writerow([g["condition"], g["experiment"], crit, repr(e[k]), repr(e[k + 1]),
                                h["true"][k], h["false"][k]])
    result = dict(
        groups=[{k: v for k, v in g.items() if k != "histograms"} for g in summary["groups"]],
        unknown=unknown, zero_error_r_delta=zero_error,
    )
    (out / "summary.json").write_text(_dump(result))
    print(f"records: {len(records)} labeled: {len(labeled)} unknown (excluded): {unknown}")
    _write_manifest(out / "manifest.json", "eval", config, args.seed, started)
    return 0


# ---------------------------------------------------------------- bench

def cmd_bench(args, cfg: dict) -> int:
    from .harness.benchmark import BenchmarkConfig, run_benchmark

    started = time.perf_counter()
    over = {**cfg.get("bench", {}), **_json_arg(args.bench)}
    spec = _build(SynthSpec.from_dict, over.pop("spec", {}), "spec")
    net_cfg = _build(convnet.NetConfig, over.pop("net", {}), "net config")
    train_cfg = _build(trainer.TrainConfig.desk, {"seed": args.seed, **over.pop("train", {})}, "train config")
    for k in ("template_sizes", "bandpass_grid"):
        if k in over:
            over[k] = tuple(tuple(v) if isinstance(v, list) else v for v in over[k])
    bcfg = _build(BenchmarkConfig, dict(spec=spec, net=net_cfg, train=train_cfg, **over), "bench config")
    config = asdict(bcfg)
    _echo("bench", config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_benchmark(bcfg)
    evaluation.write_records(res.records, out / "records.csv")
    convnet.save_checkpoint(res.params, out / "net.ncw")
    trainer.write_log(res.history, out / "train_log.csv")
    summary = evaluation.summarize(res.records)
    counts = {f'{g["condition"]}/{g["experiment"]}': g["false"] for g in summary["groups"]}
    (out / "summary.json").write_text(_dump(dict(
        false_counts=counts, bandpass={k: asdict(v) for k, v in res.bandpass.items()},
        held_out_initial=res.held_out_initial, held_out_final=res.held_out_final,
    )))
    for k, v in sorted(counts.items()):
        print(f"{k}: {v} false")
    _write_manifest(out / "manifest.json", "bench", config, args.seed, started)
    return 0


# ---------------------------------------------------------------- selfcheck

def _rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def _check_ncc(rng):
    err = 0.0
    for th, sh in ((8, 32), (16, 64), (24, 70)):
        for _ in range(5):
            t = rng.random((th, th))
            s = rng.random((sh, sh))
            err = max(err, float(np.max(np.abs(ncc_fft(t, s) - ncc_direct(t, s)))))
    return err


def _check_peak_grad(rng):
    t = rng.random((6, 6))
    s = rng.random((14, 14))
    corr = ncc_direct(t, s, out_dtype=np.float64)
    v, u = np.unravel_index(np.argmax(corr), corr.shape)
    g = ncc_peak_gradients(t, s, [(int(u), int(v))])[0]
    h = 1e-6
    num = np.zeros_like(t)
    for idx in np.ndindex(t.shape):
        tp, tm = t.copy(), t.copy()
        tp[idx] += h
        tm[idx] -= h
        num[idx] = (ncc_direct(tp, s, out_dtype=np.float64)[v, u] - ncc_direct(tm, s, out_dtype=np.float64)[v, u]) / (2 * h)
    return _rel_err(g.grad_template, num)


def _check_net_grad(rng):
    cfg = convnet.NetConfig(levels=1, base_channels=2, seed=int(rng.integers(1 << 30)))
    params = convnet.init(cfg, dtype=np.float64)
    x = rng.random((8, 8))
    g_out = rng.normal(size=(8, 8))
    out, acts = convnet.forward(params, x)
    grads, _ = convnet.backward(params, acts, g_out)
    w = params.tensors[0]
    h = 1e-6
    num = np.zeros(w.size)
    for k in range(w.size):
        orig = w.flat[k]
        w.flat[k] = orig + h
        fp = float((convnet.forward(params, x)[0] * g_out).sum())
        w.flat[k] = orig - h
        fm = float((convnet.forward(params, x)[0] * g_out).sum())
        w.flat[k] = orig
        num[k] = (fp - fm) / (2 * h)
    return _rel_err(grads.tensors[0].ravel(), num)


def _check_adam(rng):
    # with zeroed moments the bias-corrected first step is lr * g / (|g| + eps)
    cfg = convnet.NetConfig(levels=1, base_channels=2)
    params = convnet.init(cfg, dtype=np.float64)
    grads = convnet.NetParams(cfg, [rng.normal(size=t.shape) for t in params.tensors])
    lr, eps = 1e-3, 1e-8
    new, _ = trainer.adam_step(params, grads, trainer.OptimState.zeros(params), lr)
    err = 0.0
    for p, g, q in zip(params.tensors, grads.tensors, new.tensors):
        err = max(err, float(np.max(np.abs((p - q) - lr * g / (np.abs(g) + eps)))))
    return err


def _check_roundtrips(rng):
    img = (rng.integers(0, 256, size=(7, 9))).astype(np.uint8)
    f = rng.random((5, 11)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        save_pgm(img.astype(np.float64) / 255.0, Path(d) / "a.pgm")
        back = load_pgm(Path(d) / "a.pgm")
        save_f32(f, Path(d) / "a.f32")
        fb = load_f32(Path(d) / "a.f32")
    return max(float(np.max(np.abs(back * 255.0 - img))), float(np.max(np.abs(fb - f))))


SELF_CHECKS = (
    ("ncc_fft_vs_direct", _check_ncc, 1e-5),
    ("peak_gradient_fd", _check_peak_grad, 1e-4),
    ("net_gradient_fd", _check_net_grad, 1e-4),
    ("adam_first_step", _check_adam, 1e-12),
    ("raster_roundtrip", _check_roundtrips, 1e-6),
)


def cmd_selfcheck(args, cfg: dict) -> int:
    config = dict(tolerance_scale=args.tolerance_scale, checks=[c[0] for c in SELF_CHECKS])
    _echo("selfcheck", config, args.seed)
    rng = np.random.default_rng(args.seed)
    failed = 0
    for name, fn, tol in SELF_CHECKS:
        err = fn(rng)
        tol = tol * args.tolerance_scale
        ok = err <= tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name} max_err={err:.3e} tol={tol:.3e}")
    print(f"{len(SELF_CHECKS) - failed}/{len(SELF_CHECKS)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siamese-ncc", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/FFT threads (default: all)")
    p.add_argument("--config", default=None, help="JSON object or file with per-command defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic stack with ground-truth warps")
    g.add_argument("--spec", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--sections", type=int, default=3)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the siamese preprocessing net")
    t.add_argument("--data", required=True)
    t.add_argument("--net", default=None)
    t.add_argument("--train", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.add_argument("--init", default=None, help="start from this checkpoint")
    t.add_argument("--factor", type=int, default=3)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("match", help="grid-match one section pair")
    m.add_argument("--pair", nargs=2, required=True, metavar=("A", "B"))
    m.add_argument("--condition", choices=CONDITIONS, default="raw")
    m.add_argument("--ckpt", default=None)
    m.add_argument("--bandpass", default=None)
    m.add_argument("--grid", default=None)
    m.add_argument("--match", default=None)
    m.add_argument("--pair-id", default=None)
    m.add_argument("--experiment", default="pair")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("eval", help="label records and write summaries and rejection curves")
    e.add_argument("--records", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--tolerance", type=float, default=10.0)
    e.add_argument("--radius", type=float, default=0.0, help="neighbour radius for outlier flags (0: off)")
    e.add_argument("--neighbor-threshold", type=float, default=50.0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run the full synthetic benchmark")
    b.add_argument("--bench", default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("selfcheck", help="oracle checks")
    s.add_argument("--tolerance-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = _json_arg(args.config)
    except UsageError as e:
        parser.error(str(e))
    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        return args.func(args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, RasterFormatError, ValueError, trainer.TrainingError) as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
