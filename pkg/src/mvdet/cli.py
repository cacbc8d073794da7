"""Operator entry point.

Subcommands: gen (synthesize a dataset), train, eval (full, overlap-only
or NMS-augmented), bench (inference timing with and without NMS),
gradcheck (finite-difference verification), render (overlay images).
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import os

# small matrices throughout: a single BLAS worker is both faster and
# bitwise reproducible (must be set before numpy loads)
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse
import sys

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--val-scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--min-objects", type=int, default=3)
    p.add_argument("--max-objects", type=int, default=8)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--layer", type=int, default=-1, help="layer to read (default last)")
    p.add_argument("--overlap-only", action="store_true")
    p.add_argument("--with-nms", action="store_true")
    p.add_argument("--nms-iou", type=float, default=0.5)

    p = sub.add_parser("bench", help="time inference with and without NMS")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="JSON timing record path")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--scenes", type=int, default=3)
    p.add_argument("--repetitions", type=int, default=3)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=100)

    p = sub.add_parser("render", help="overlay predictions on a scene")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--score-threshold", type=float, default=0.3)
    return parser


def _cmd_gen(args) -> int:
    from .synth import SceneSpec, gen_split

    spec = SceneSpec(
        num_cameras=args.cameras,
        image_width=args.image_size,
        image_height=args.image_size,
        num_classes=args.classes,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
    )
    train_seeds = range(args.seed, args.seed + args.scenes)
    val_seeds = range(args.seed + 100000, args.seed + 100000 + args.val_scenes)
    manifest = gen_split(spec, train_seeds, val_seeds, args.out)
    print(f"wrote {args.scenes} train + {args.val_scenes} val scenes; manifest: {manifest}")
    return 0


def _cmd_train(args) -> int:
    from .config import load_config
    from .train import train_run

    cfg = load_config(args.config)
    result = train_run(
        cfg,
        resume=args.resume,
        progress=lambda step, total: print(f"step {step}: loss {total:.4f}", flush=True),
    )
    print(f"finished {result.steps} steps; loss {result.first_loss:.4f} -> {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.loss_log_path}")
    return 0


def _load_eval_pieces(args):
    from .config import load_config
    from .synth import read_manifest, read_scene
    from .train import load_detector

    cfg = load_config(args.config)
    det = load_detector(args.checkpoint, cfg)
    manifest = read_manifest(cfg.dataset)
    paths = manifest.get(args.split, [])
    if not paths:
        raise FileNotFoundError(f"no {args.split} scenes in {cfg.dataset}")
    scenes = [read_scene(p) for p in paths]
    return cfg, det, scenes


def _cmd_eval(args) -> int:
    from . import evaluation as ev
    from . import nms as nms_mod

    cfg, det, scenes = _load_eval_pieces(args)
    os.makedirs(args.out, exist_ok=True)
    preds = {}
    gts = {}
    rigs = {}
    for scene in scenes:
        sid = f"scene{scene.seed:06d}"
        images = scene.images.astype(np.float64) / 255.0
        outputs = det.forward(images, scene.rig)
        layer = args.layer if args.layer >= 0 else len(outputs) - 1
        recs = ev.detections_from_layer(outputs[layer], sid)
        if args.with_nms:
            boxes = nms_mod.scored_boxes_from_layer(outputs[layer])
            survivors = nms_mod.nms_global(boxes, args.nms_iou)
            kept_keys = {(b.box.tobytes(), round(b.score, 12)) for b in survivors}
            recs = [r for r in recs if (r.box.tobytes(), round(r.score, 12)) in kept_keys]
        preds[sid] = recs
        gts[sid] = ev.records_from_scene(scene, sid)
        rigs[sid] = scene.rig

    ev.write_records([r for rs in preds.values() for r in rs], os.path.join(args.out, "predictions.txt"))
    ev.write_records([r for rs in gts.values() for r in rs], os.path.join(args.out, "ground_truth.txt"))
    classes = tuple(range(cfg.num_classes))
    report = ev.evaluate(
        preds, gts, ev.EvalConfig(classes=classes), rigs=rigs, overlap_only=args.overlap_only
    )
    ev.write_report(
        report, os.path.join(args.out, "report.txt"), os.path.join(args.out, "report.json")
    )
    print(ev.report_table(report))
    if report.NDS is None:
        print("warning: empty evaluation subset; NDS undefined", file=sys.stderr)
    return 0


def _cmd_bench(args) -> int:
    from . import nms as nms_mod

    _, det, scenes = _load_eval_pieces(args)
    reports = nms_mod.bench(det, scenes[: args.scenes], repetitions=args.repetitions)
    print(nms_mod.timing_table(reports))
    if args.out:
        nms_mod.write_timing(reports, args.out)
        print(f"timing record: {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from . import gradcheck

    report = gradcheck.run(tolerance=args.tolerance, seed=args.seed, max_coords=args.max_coords)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def _cmd_render(args) -> int:
    from .config import load_config
    from .synth import read_scene
    from .train import load_detector
    from .viz import render_overlays

    cfg = load_config(args.config)
    det = load_detector(args.checkpoint, cfg)
    scene = read_scene(args.scene)
    images = scene.images.astype(np.float64) / 255.0
    outputs = det.forward(images, scene.rig)
    written = render_overlays(
        scene, outputs, args.out, per_layer=args.per_layer,
        score_threshold=args.score_threshold,
    )
    print(f"wrote {len(written)} images to {args.out}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
    "render": _cmd_render,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures exit 1, usage errors exit 2 via argparse
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
