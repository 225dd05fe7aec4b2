"""
Command line entry point: ``python -m sumnet <command>``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
import argparse
import os
import sys

import numpy as np

from .config import (
    DEFAULT_THRESHOLD, PUBLISHED_CPU_SEC_PER_FRAME, PUBLISHED_GPU_SEC_PER_FRAME,
    PUBLISHED_SEC_PER_VOLUME, load_config,
)
from .data_access import read_volume, volume_from_arrays, write_volume
from .errors import NumericalError, SumNetError
from .metrics import aggregate, evaluate_masks, format_summary
from .model import load_weights
from .phantom import KINDS, synth_dataset
from .report import read_csv_or_none, write_report
from .train import crossval, gradcheck_network, infer_volume, train
from .utils import ensure_dir, get_logger, overlay_masks, save_png

logger = get_logger(__name__)

GRADCHECK_TOLERANCE = 1e-4


def cmd_train(args):
    cfg = load_config(args.config)
    if args.fold is not None:
        cfg.fold = str(args.fold)
    result = train(cfg)
    print(f"Trained {len(result.log)} steps; best epoch loss {result.best_loss:.6f}")
    print(f"Checkpoints and log written to {result.checkpoint_dir}")
    return 0


def cmd_infer(args):
    params = load_weights(args.weights)
    image = read_volume(args.volume)
    masks = {"gt": read_volume(args.gt)} if args.gt else None
    record = volume_from_arrays(os.path.splitext(os.path.basename(args.volume))[0], image, masks)
    result = infer_volume(params, record, args.threshold, args.n_jobs)

    out = ensure_dir(args.out)
    pred_path = write_volume(os.path.join(out, "prediction.usvl"), (result.masks[:, 0] * 255).astype(np.uint8))
    timing = result.timing
    timing.as_frame().to_csv(os.path.join(out, "timing.csv"), index=False)

    if args.png_every:
        gt = record.crop(record.masks["gt"]) if masks else None
        for i in range(0, len(result.masks), args.png_every):
            frame = image[i].astype(np.float64) / 255.0
            overlay = overlay_masks(frame, None if gt is None else gt[i, 0], result.masks[i, 0])
            save_png(overlay, os.path.join(out, f"frame_{i:04d}.png"))

    h, w = image.shape[1:]
    print(f"Inferred {len(result.masks)} frames of {h}x{w} -> {pred_path}")
    print(f"Per frame: mean {timing.mean:.4f} s, median {timing.median:.4f} s")
    print(f"Total: {timing.total:.2f} s (sum of frames), {timing.wall:.2f} s wall")
    print(f"Published reference: {PUBLISHED_GPU_SEC_PER_FRAME} s/frame GPU, "
          f"{PUBLISHED_CPU_SEC_PER_FRAME} s/frame CPU, {PUBLISHED_SEC_PER_VOLUME} s/volume "
          "(informational, hardware differs)")
    if masks:
        gt = record.crop(record.masks["gt"])
        frames = evaluate_masks(result.masks, gt, patient=record.patient_id)
        frames.to_csv(os.path.join(out, "metrics.csv"), index=False)
        print(format_summary(aggregate(frames, "all")).to_string(index=False))
    return 0


def cmd_eval(args):
    pred = (read_volume(args.pred) > 127).astype(np.uint8)
    gt = (read_volume(args.gt) > 127).astype(np.uint8)
    spacing = tuple(args.spacing) if args.spacing else None
    frames = evaluate_masks(pred, gt, spacing, patient=os.path.basename(args.gt), n_jobs=args.n_jobs)
    if args.out:
        frames.to_csv(args.out, index=False)
    print(format_summary(aggregate(frames, "all")).to_string(index=False))
    return 0


def cmd_crossval(args):
    cfg = load_config(args.config)
    result = crossval(cfg, n_jobs=args.n_jobs)
    print(result.table.to_string(index=False))
    print(f"Tables written to {cfg.checkpoint_dir}")
    return 0


def cmd_synth(args):
    h, w = args.hw
    spacing = tuple(args.spacing) if args.spacing else None
    manifest = synth_dataset(args.out, args.n, args.kind, (h, w), seed=args.seed,
                             frames=args.frames, spacing=spacing)
    print(f"Wrote {args.n} {args.kind} phantoms; manifest: {manifest}")
    return 0


def cmd_gradcheck(args):
    errors = gradcheck_network(tuple(args.size), base_width=args.base_width,
                               seed=args.seed, eps=args.eps)
    for name, err in errors.items():
        print(f"{name:<16} {err:.3e}")
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    print(f"max relative error {worst:.3e} ({worst_name})")
    if worst >= GRADCHECK_TOLERANCE:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE} at {worst_name}")
    return 0


def cmd_report(args):
    path = write_report(
        args.out,
        log=read_csv_or_none(args.log),
        frames=read_csv_or_none(args.metrics),
        timing=read_csv_or_none(args.timing),
        metric=args.metric,
    )
    print(f"Report written to {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sumnet", description="SUMNet ultrasound segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a USVL volume frame by frame")
    p.add_argument("--weights", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--gt", default=None, help="ground-truth mask volume for metrics and overlays")
    p.add_argument("--png-every", type=int, default=0, help="write an overlay PNG every N frames")
    p.add_argument("--n-jobs", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics between two mask volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--spacing", type=float, nargs=2, metavar=("SY", "SX"))
    p.add_argument("--out", default=None, help="per-frame CSV")
    p.add_argument("--n-jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="patient-wise cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--n-jobs", type=int, default=None)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("synth", help="write speckle phantom patients and a manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=KINDS, default="blob")
    p.add_argument("--hw", type=int, nargs=2, metavar=("H", "W"), default=[64, 96])
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--spacing", type=float, nargs=2, metavar=("SY", "SX"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole network")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=[32, 32])
    p.add_argument("--base-width", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="HTML figures from training/metric/timing CSVs")
    p.add_argument("--log", default=None)
    p.add_argument("--metrics", default=None)
    p.add_argument("--timing", default=None)
    p.add_argument("--metric", default="dice")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except SumNetError as e:
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
