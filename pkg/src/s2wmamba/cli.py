"""Command-line surface for offline experiments.

Subcommands: gen, train, fuse, eval, bench, dwt. Outputs are text-first
(key=value lines and aligned tables) so runs can be diffed. Every run emits a
manifest: commands with an output location write <out>/manifest.json or
<primary-output>.manifest.json, report-only commands print a manifest= line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dataset, metrics
from .fmamba import benchmark_scan
from .network import (
    ABLATION_NAMES,
    AblationConfig,
    DivergenceError,
    ModelConfig,
    S2WMambaNet,
    TrainConfig,
    count_parameters,
    load_checkpoint,
    train_toy,
)
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad
from .wavelet import dwt1d, dwt2d, idwt1d, idwt2d

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    env = os.environ.get("S2W_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"S2W_SEED must be an integer, got {env!r}") from exc
    return DEFAULT_SEED


def _manifest(command: str, config: dict, seed, timings: dict, outputs: list) -> dict:
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "timings": {k: round(v, 6) for k, v in timings.items()},
        "outputs": [str(p) for p in outputs],
    }


def _emit_manifest(man: dict, path=None):
    if path is not None:
        Path(path).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    else:
        print("manifest=" + json.dumps(man, sort_keys=True))


def _build_parser() -> _Parser:
    parser = _Parser(prog="s2w", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"s2w {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic triplet dataset")
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--ablation", default=None, choices=list(ABLATION_NAMES))
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--d-state", type=int, default=16)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("fuse", help="fuse a pan/lrms pair with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--lrms", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preview", default=None, help="optional portable-graymap preview of band 0")

    p = sub.add_parser("eval", help="quality metrics (reduced or full resolution)")
    p.add_argument("--pred", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--fused", default=None)
    p.add_argument("--lrms", default=None)
    p.add_argument("--pan", default=None)
    p.add_argument("--ratio", type=int, default=None)
    p.add_argument("--peak", type=float, default=1.0)

    p = sub.add_parser("bench", help="timing tables for the scan or the transforms")
    p.add_argument("--op", choices=["scan", "dwt"], default="scan")
    p.add_argument("--sizes", default="1024,4096,16384")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("dwt", help="transform roundtrip checks on a file")
    p.add_argument("--mode", choices=["1d", "2d"], required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--roundtrip", action="store_true")
    return parser


def _cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.bands < 1 or args.size < args.ratio or args.count < 1:
        raise UsageError("gen: bands/size/count out of range")
    if args.ratio < 1 or args.ratio & (args.ratio - 1):
        raise UsageError("gen: ratio must be a power of two")
    t0 = time.perf_counter()
    spec = dataset.SceneSpec(c=args.bands, size=args.size, count=args.count, seed=seed)
    scenes = dataset.generate_scenes(spec)
    outputs = []
    for i, scene in enumerate(scenes):
        trip = dataset.wald_degrade(scene, args.ratio)
        dataset.write_triplet(args.out, args.split, i, trip)
        outputs.extend(str(p) for p in dataset.triplet_paths(args.out, args.split, i).values())
    man = _manifest(
        "gen",
        {"bands": args.bands, "size": args.size, "count": args.count, "ratio": args.ratio, "split": args.split},
        seed,
        {"wall_s": time.perf_counter() - t0},
        outputs,
    )
    _emit_manifest(man, Path(args.out) / "manifest.json")
    print(f"wrote {args.count} triplets to {args.out}/{args.split}")
    return EXIT_OK


def _infer_data_config(triplets) -> tuple[int, int]:
    t = triplets[0]
    c = t.gt.shape[0]
    r = t.gt.shape[1] // t.lrms.shape[1]
    return c, r


def _cmd_train(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    t0 = time.perf_counter()
    train_set = dataset.load_split(args.data, "train")
    try:
        val_set = dataset.load_split(args.data, "val")
    except dataset.FormatError:
        val_set = None
    c, r = _infer_data_config(train_set)
    cfg = ModelConfig(c=c, r=r, width=args.width, d_state=args.d_state)
    if args.ablation is not None:
        ab = AblationConfig.from_name(args.ablation)
        cfg = ModelConfig(
            c=c, r=r, width=args.width, d_state=args.d_state,
            variant=ab.variant, no_gm=ab.no_gm, no_gc=ab.no_gc, no_ga=ab.no_ga,
        )
    model = S2WMambaNet(cfg, seed=seed)
    tcfg = TrainConfig(learning_rate=args.lr, steps=args.steps, batch_size=args.batch, patch=args.patch, seed=seed)
    history = train_toy(model, train_set, tcfg, val_set=val_set, ckpt_path=args.ckpt)
    print(f"{'step':>6s} {'loss':>12s} {'lr':>10s} {'val_psnr':>9s}")
    for rec in history:
        val = f"{rec['val_psnr']:9.3f}" if "val_psnr" in rec else " " * 9
        print(f"{rec['step']:6d} {rec['loss']:12.6f} {rec['lr']:10.2e} {val}")
    print(f"params={count_parameters(model)}")
    man = _manifest(
        "train",
        {"data": args.data, "steps": args.steps, "batch": args.batch, "lr": args.lr,
         "ablation": args.ablation, "width": args.width, "patch": args.patch},
        seed,
        {"wall_s": time.perf_counter() - t0},
        [args.ckpt],
    )
    _emit_manifest(man, str(args.ckpt) + ".manifest.json")
    return EXIT_OK


def _cmd_fuse(args) -> int:
    t0 = time.perf_counter()
    model = load_checkpoint(args.ckpt)
    pan = dataset.read_image(args.pan).astype(np.float64)
    lrms = dataset.read_image(args.lrms).astype(np.float64)
    with no_grad():
        fused = model.forward(pan, lrms).data
    dataset.write_image(args.out, fused)
    outputs = [args.out]
    if args.preview:
        dataset.write_pgm(args.preview, fused[0])
        outputs.append(args.preview)
    man = _manifest(
        "fuse",
        {"ckpt": args.ckpt, "pan": args.pan, "lrms": args.lrms},
        None,
        {"wall_s": time.perf_counter() - t0},
        outputs,
    )
    _emit_manifest(man, str(args.out) + ".manifest.json")
    print(f"fused={args.out} shape={'x'.join(map(str, fused.shape))}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    t0 = time.perf_counter()
    reduced = args.pred is not None or args.gt is not None
    full = args.fused is not None or args.lrms is not None or args.pan is not None
    if reduced == full:
        raise UsageError("eval: use either --pred/--gt or --fused/--lrms/--pan")
    report = metrics.MetricsReport()
    if reduced:
        if args.pred is None or args.gt is None:
            raise UsageError("eval: reduced mode needs both --pred and --gt")
        pred = dataset.read_image(args.pred).astype(np.float64)
        gt = dataset.read_image(args.gt).astype(np.float64)
        ratio = args.ratio if args.ratio is not None else 4
        report.psnr = metrics.psnr(pred, gt, peak=args.peak)
        report.sam = metrics.sam(pred, gt)
        report.ergas = metrics.ergas(pred, gt, ratio)
        report.q2n = metrics.q2n(pred, gt)
    else:
        if args.fused is None or args.lrms is None or args.pan is None:
            raise UsageError("eval: full-resolution mode needs --fused, --lrms and --pan")
        fused = dataset.read_image(args.fused).astype(np.float64)
        lrms = dataset.read_image(args.lrms).astype(np.float64)
        pan = dataset.read_image(args.pan).astype(np.float64)
        ratio = args.ratio if args.ratio is not None else fused.shape[1] // lrms.shape[1]
        pan_lp = dataset.degrade_pan(pan, ratio)
        report.d_lambda = metrics.d_lambda(fused, lrms)
        report.d_s = metrics.d_s(fused, lrms, pan, pan_lp)
        report.hqnr = metrics.hqnr(report.d_lambda, report.d_s)
    for line in report.lines():
        print(line)
    man = _manifest(
        "eval",
        {k: getattr(args, k) for k in ("pred", "gt", "fused", "lrms", "pan", "ratio", "peak")},
        None,
        {"wall_s": time.perf_counter() - t0},
        [],
    )
    _emit_manifest(man)
    return EXIT_OK


def _cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"bench: bad --sizes {args.sizes!r}") from exc
    if not sizes:
        raise UsageError("bench: no sizes given")
    t0 = time.perf_counter()
    if args.op == "scan":
        rows = benchmark_scan(sizes, repeats=args.repeats, seed=seed)
        print(f"{'N':>8s} {'seconds':>12s} {'ratio':>7s} {'peak_MiB':>9s}")
        prev = None
        for row in rows:
            ratio = f"{row['seconds'] / prev:7.2f}" if prev else " " * 7
            print(f"{row['n']:8d} {row['seconds']:12.6f} {ratio} {row['peak_bytes'] / 2**20:9.2f}")
            prev = row["seconds"]
    else:
        rng = np.random.default_rng(seed)
        print(f"{'side':>8s} {'seconds':>12s} {'max_err':>10s}")
        for side in sizes:
            img = Tensor(rng.uniform(0.0, 1.0, size=(4, side, side)))
            tic = time.perf_counter()
            with no_grad():
                rec = idwt2d(dwt2d(img))
            dt = time.perf_counter() - tic
            err = float(np.abs(rec.data - img.data).max())
            print(f"{side:8d} {dt:12.6f} {err:10.2e}")
    man = _manifest(
        "bench",
        {"op": args.op, "sizes": sizes, "repeats": args.repeats},
        seed,
        {"wall_s": time.perf_counter() - t0},
        [],
    )
    _emit_manifest(man)
    return EXIT_OK


def _cmd_dwt(args) -> int:
    t0 = time.perf_counter()
    img = Tensor(dataset.read_image(args.infile))
    with no_grad():
        if args.mode == "2d":
            bands = dwt2d(img)
            detail = max(
                float(np.abs(bands.lh.data).max()),
                float(np.abs(bands.hl.data).max()),
                float(np.abs(bands.hh.data).max()),
            )
            print(f"subband_shape={'x'.join(map(str, bands.ll.shape))}")
            print(f"detail_max_abs={detail:.6e}")
            if args.roundtrip:
                err = float(np.abs(idwt2d(bands).data - img.data).max())
                print(f"roundtrip_max_error={err:.6e}")
        else:
            low, high = dwt1d(img)
            print(f"subband_shape={'x'.join(map(str, low.shape))}")
            print(f"h_band_max_abs={float(np.abs(high.data).max()):.6e}")
            if args.roundtrip:
                err = float(np.abs(idwt1d(low, high).data - img.data).max())
                print(f"roundtrip_max_error={err:.6e}")
    man = _manifest(
        "dwt",
        {"mode": args.mode, "in": args.infile, "roundtrip": args.roundtrip},
        None,
        {"wall_s": time.perf_counter() - t0},
        [],
    )
    _emit_manifest(man)
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "dwt": _cmd_dwt,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dataset.FormatError, ShapeError, metrics.MetricError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
