"""Command-line entry point: ``danet <command> [options]``.

Exit codes: 0 success, 1 failed self-test or benchmark, 2 usage, 3 input
format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PRESETS, ConfigError, DANetConfig, format_config, load_config, preset

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

WEIGHTS_NAME = "weights.danw"


class UsageError(Exception):
    """Flag values that parse but cannot be used together."""


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _box(text: str):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected x,y,w,h, got {text!r}")
    return vals


def _threads_default() -> int:
    raw = os.environ.get("DANET_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"DANET_THREADS must be a positive integer, got {raw!r}")
    return n


def _common(with_model: bool = True) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--out", help="output file or directory (see command help)")
    if with_model:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--config", help="network config file")
        g.add_argument("--preset", choices=PRESETS, help="named network preset")
        p.add_argument("--weights", help="weights file written by train-toy")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="danet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    parser.commands = sub.choices
    model_flags = _common()
    plain_flags = _common(with_model=False)

    p = sub.add_parser("summary", parents=[model_flags], help="params and FLOPs per module")
    p.add_argument("--input-size", type=_size, help="HxW (default: the config's input size)")

    p = sub.add_parser("train-toy", parents=[model_flags], help="overfit a small synthetic set")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--ohkm-k", type=int, default=8)
    p.add_argument("--augment", action="store_true", help="use the full augmentation ranges")
    p.add_argument("--stop-pck", type=float, help="stop once train PCK@0.5 reaches this value")
    p.add_argument("--check-every", type=int, default=100)

    p = sub.add_parser("infer", parents=[model_flags], help="keypoints for boxes in one image")
    p.add_argument("--image", required=True, help="PNG or raw image")
    p.add_argument("--box", type=_box, action="append", help="x,y,w,h (repeatable; default whole image)")
    p.add_argument("--ann-id", type=int, action="append", help="annotation id per box (for PCKh)")
    p.add_argument("--image-id", type=int, default=0)
    p.add_argument("--flip", action="store_true", help="average with the mirrored input")

    p = sub.add_parser("eval", parents=[plain_flags], help="COCO AP or MPII PCKh")
    p.add_argument("--pred", required=True, help="predictions (JSON lines)")
    p.add_argument("--ann", required=True, help="annotations (COCO-style JSON)")
    p.add_argument("--mode", choices=("coco", "mpii"), default="coco")
    p.add_argument("--tau", type=float, default=0.5, help="PCKh threshold (mpii mode)")

    p = sub.add_parser("bench", parents=[model_flags], help="persons-per-second benchmark")
    p.add_argument("--threads", type=int, help="worker threads (default $DANET_THREADS or 1)")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--persons", type=int, default=32)
    p.add_argument("--replicate", action="store_true", help="give each worker its own model copy")
    p.add_argument("--input-size", type=_size)

    p = sub.add_parser("analyze-weights", parents=[model_flags], help="connectivity maps as SVG + CSV")
    p.add_argument("--stage", type=int, action="append", help="1-based stage (repeatable; default all)")

    p = sub.add_parser("selftest", parents=[model_flags], help="gradient, channel-flow and codec checks")
    return parser


def resolve_config(args) -> DANetConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return preset(getattr(args, "preset", None) or "tiny")


def _model(args, cfg: DANetConfig):
    from .model import build_model
    from .weights import load_weights

    if args.weights:
        return load_weights(args.weights, cfg)
    return build_model(cfg, args.seed).eval()


def _write(path: Optional[str], text: str) -> None:
    from .fileio import atomic_write_text

    if path:
        atomic_write_text(path, text)


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_summary(args, out) -> int:
    from .cost import count_flops
    from .model import build_model

    if args.preset is None and args.config is None:
        raise UsageError("summary needs --preset or --config")
    cfg = resolve_config(args)
    report = count_flops(build_model(cfg, args.seed), input_size=args.input_size)
    rows = report.rows()
    h, w = report.input_size
    print(f"{cfg.name} @ {h}x{w}, FLOPs convention: {report.flops_convention}", file=out)
    print(f"{'module':<12} {'params':>12} {'flops':>16}", file=out)
    for name, params, flops in rows:
        print(f"{name:<12} {params:>12,d} {flops:>16,d}", file=out)
    print(f"total: {report.total_params / 1e6:.3f} M params, {report.total_flops / 1e9:.3f} GFLOPs", file=out)
    _write(args.out, _csv([("module", "params", "flops"), *rows]))
    return EXIT_OK


def cmd_train_toy(args, out) -> int:
    from .fileio import atomic_write_bytes, atomic_write_text
    from .imaging import encode_raw, to_uint8
    from .metrics import InstanceAnnotation
    from .model import build_model
    from .records import write_annotations
    from .train import AugmentRanges, TrainConfig, pck_on_samples, synth_dataset, train_loop, write_trace_csv
    from .weights import save_weights

    if not args.out:
        raise UsageError("train-toy needs --out DIR")
    if args.samples < 1 or args.iters < 1 or args.batch_size < 1 or args.check_every < 1:
        raise UsageError("--samples, --iters, --batch-size and --check-every must be >= 1")
    cfg = resolve_config(args)
    outdir = Path(args.out)
    (outdir / "samples").mkdir(parents=True, exist_ok=True)
    data = synth_dataset(args.samples, seed=args.seed, size=tuple(cfg.input_size))
    tc = TrainConfig(base_lr=args.lr, total_iters=args.iters, batch_size=args.batch_size, ohkm_k=args.ohkm_k,
                     seed=args.seed, augment=AugmentRanges() if args.augment else None)
    model = build_model(cfg, args.seed)

    done = [0]  # iterations completed, for progress lines

    def check(m):
        score = pck_on_samples(m, data, 0.5)
        print(f"iter {done[0]}: train PCK@0.5 = {score:.3f}", file=out)
        return score

    def count(it, lr, loss):
        done[0] = it + 1

    res = train_loop(model, data, tc, check=check, check_every=args.check_every, stop_at=args.stop_pck,
                     on_iter=count)
    save_weights(res.model, outdir / WEIGHTS_NAME)
    write_trace_csv(res.trace, outdir / "loss.csv")
    atomic_write_text(outdir / "config.txt", format_config(cfg))
    h, w = cfg.input_size
    anns = []
    for i, s in enumerate(data):
        atomic_write_bytes(outdir / "samples" / f"sample_{i:03d}.raw", encode_raw(to_uint8(s.image)))
        kp = np.concatenate([s.keypoints, np.where(s.visible, 2.0, 0.0)[:, None]], axis=1)
        kp[~s.visible, :2] = 0.0
        anns.append(InstanceAnnotation(id=i, image_id=i, keypoints=kp, area=float(h * w),
                                       bbox=(0.0, 0.0, float(w), float(h)), head_size=s.head_size))
    write_annotations(anns, outdir / "samples" / "annotations.json",
                      images=[{"id": i, "width": w, "height": h, "file_name": f"sample_{i:03d}.raw"}
                              for i in range(len(data))])
    final = res.history[-1][1] if res.history else float("nan")
    print(f"trained {res.iterations} iterations, final loss {res.trace[-1][2]:.6g}, "
          f"train PCK@0.5 {final:.3f}; wrote {outdir}", file=out)
    return EXIT_OK


def cmd_infer(args, out) -> int:
    from .imaging import read_image
    from .infer import clamp_box, estimate_pose
    from .records import dump_jsonl, prediction_record

    if not args.weights:
        raise UsageError("infer needs --weights")
    cfg = resolve_config(args)
    model = _model(args, cfg)
    image = read_image(args.image)
    ih, iw = image.shape[:2]
    boxes = args.box or [(0.0, 0.0, float(iw), float(ih))]
    ann_ids = args.ann_id or [None] * len(boxes)
    if len(ann_ids) != len(boxes):
        raise UsageError(f"{len(ann_ids)} --ann-id values for {len(boxes)} boxes")
    records = []
    for i, (box, ann_id) in enumerate(zip(boxes, ann_ids)):
        clamped, changed = clamp_box(box, iw, ih)
        if changed:
            print(f"warning: box {i} {tuple(box)} clamped to {clamped}", file=sys.stderr)
        kps = estimate_pose(model, image, clamped, flip=args.flip)
        records.append(prediction_record(kps, image_id=args.image_id, ann_id=ann_id, box=clamped))
    text = dump_jsonl(records)
    if args.out:
        _write(args.out, text)
    else:
        out.write(text)
    return EXIT_OK


def _pct(v: float) -> str:
    return "nan" if math.isnan(v) else f"{100 * v:.1f}"


def cmd_eval(args, out) -> int:
    from .metrics import coco_ap, pckh
    from .records import load_annotations, load_predictions, pair_by_id

    anns = load_annotations(args.ann)
    preds = load_predictions(args.pred)
    if args.mode == "coco":
        values = coco_ap([p for p, _ in preds], anns).as_dict()
    else:
        paired = pair_by_id(preds, anns)
        missing = [a.id for a, p in zip(anns, paired) if p is None]
        if missing:
            print(f"warning: {len(missing)} annotations without a prediction count as misses", file=sys.stderr)
        # a missing prediction is placed infinitely far away
        xy = [p if p is not None else np.full((a.keypoints.shape[0], 2), np.inf) for a, p in zip(anns, paired)]
        res = pckh(xy, anns, args.tau)
        if res.skipped:
            print(f"warning: {res.skipped} annotations without a head size skipped", file=sys.stderr)
        # the grouped columns only make sense for the 16-joint layout
        values = res.mpii_summary() if len(res.labeled) == 16 else {"Mean": res.mean}
    print("  ".join(f"{k} {_pct(v)}" for k, v in values.items()), file=out)
    _write(args.out, _csv([list(values), [repr(float(v)) for v in values.values()]]))
    return EXIT_OK


def cmd_bench(args, out) -> int:
    from .bench import bench_pps

    threads = args.threads if args.threads is not None else _threads_default()
    if threads < 1 or args.batch_size < 1 or args.warmup < 0:
        raise UsageError("--threads and --batch-size must be >= 1, --warmup >= 0")
    if args.persons < args.batch_size:
        raise UsageError(f"--persons {args.persons} is smaller than --batch-size {args.batch_size}")
    cfg = resolve_config(args)
    report = bench_pps(_model(args, cfg), batch_size=args.batch_size, threads=threads, warmup=args.warmup,
                       persons=args.persons, input_size=args.input_size, replicate=args.replicate,
                       seed=args.seed)
    print(report.to_text(), file=out)
    _write(args.out, report.to_csv())
    return EXIT_OK


def cmd_analyze_weights(args, out) -> int:
    from .analysis import emit_heatmap_svg, weight_connectivity

    if not args.out:
        raise UsageError("analyze-weights needs --out DIR")
    cfg = resolve_config(args)
    model = _model(args, cfg)
    stages = args.stage or [i + 1 for i, s in enumerate(cfg.stages) if s.layers > 0]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for st in stages:
        svg = outdir / f"stage{st}_connectivity.svg"
        sidecar = emit_heatmap_svg(weight_connectivity(model, st), svg)
        print(f"stage {st}: {svg} {sidecar}", file=out)
    return EXIT_OK


def cmd_selftest(args, out) -> int:
    from .selftest import run_selftest

    cfg = resolve_config(args)
    results = run_selftest(args.seed, weights=args.weights, config=cfg)
    for r in results:
        print(r.line(), file=out)
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed", file=out)
    return EXIT_FAILED if failed else EXIT_OK


COMMANDS = {
    "summary": cmd_summary,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "analyze-weights": cmd_analyze_weights,
    "selftest": cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    from .autograd.functional import ShapeError
    from .bench import BenchError
    from .imaging import ImageFormatError
    from .records import RecordError
    from .weights import WeightsError

    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        parser.commands[args.command].print_usage(sys.stderr)
        print(f"danet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"danet {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, RecordError, ImageFormatError, WeightsError, ShapeError) as exc:
        print(f"danet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"danet {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BenchError as exc:
        print(f"danet {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
