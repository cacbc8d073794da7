"""BEV non-maximum suppression baseline and an inference timing harness.

The set-prediction head needs no suppression; these routines exist to
demonstrate that. Rotated-rectangle IoU uses exact polygon clipping
(Sutherland-Hodgman) with shoelace areas. The bench times one shared
forward pass per scene and each suppression stage separately, so the
variant totals differ exactly by the measured suppression cost.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import bev_corners
from .geometry import project_points


@dataclass
class ScoredBox:
    box: np.ndarray  # (9,)
    score: float
    source_camera: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class TimingReport:
    variant: str
    mean_seconds: float
    stages: dict = field(default_factory=dict)

    @property
    def fps(self) -> float:
        return 1.0 / self.mean_seconds


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip a convex polygon by a convex CCW polygon."""
    output = list(subject)
    for i in range(len(clip)):
        a, b = clip[i], clip[(i + 1) % len(clip)]
        if not output:
            break
        current = output
        output = []
        for j in range(len(current)):
            cur, nxt = current[j], current[(j + 1) % len(current)]
            cur_in = _cross(a, b, cur) >= 0
            nxt_in = _cross(a, b, nxt) >= 0
            if cur_in:
                output.append(cur)
            if cur_in != nxt_in:
                d = nxt - cur
                denom = (b[1] - a[1]) * d[0] - (b[0] - a[0]) * d[1]
                t = ((b[0] - a[0]) * (cur[1] - a[1]) - (b[1] - a[1]) * (cur[0] - a[0])) / denom
                output.append(cur + t * d)
    return np.array(output).reshape(-1, 2)


def _area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_iou(box_a, box_b) -> float:
    """Intersection over union of two rotated BEV footprints, in [0, 1]."""
    a = np.asarray(box_a, dtype=np.float64).reshape(9)
    b = np.asarray(box_b, dtype=np.float64).reshape(9)
    if min(a[3], a[4], b[3], b[4]) <= 0:
        raise ValueError("box sizes must be positive")
    ca, cb = bev_corners(a), bev_corners(b)
    inter = _area(_clip_polygon(ca, cb))
    area_a, area_b = _area(ca), _area(cb)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms_global(boxes: list[ScoredBox], iou_thresh: float = 0.5) -> list[ScoredBox]:
    """Greedy score-descending suppression across the whole set.

    Survivors are returned sorted by score; ties keep input order. A box
    is suppressed when its IoU with an already-kept box exceeds the
    threshold (equality survives).
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou threshold must lie in (0, 1)")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(bev_iou(boxes[i].box, boxes[j].box) <= iou_thresh for j in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


def nms_per_camera(boxes: list[ScoredBox], iou_thresh: float = 0.5) -> list[ScoredBox]:
    """Suppression applied independently inside each camera's subset."""
    groups: dict[int, list[ScoredBox]] = {}
    for b in boxes:
        if b.source_camera is None:
            raise ValueError("per-camera NMS needs source_camera on every box")
        groups.setdefault(b.source_camera, []).append(b)
    out: list[ScoredBox] = []
    for cam in sorted(groups):
        out.extend(nms_global(groups[cam], iou_thresh))
    return out


def assign_source_cameras(boxes: list[ScoredBox], rig) -> None:
    """Tag each box with the first camera that sees its center (-1 if none)."""
    for b in boxes:
        b.source_camera = -1
        for m, cam in enumerate(rig):
            if int(project_points(cam, b.box[None, :3])[2][0]):
                b.source_camera = m
                break


def scored_boxes_from_layer(layer_output) -> list[ScoredBox]:
    probs = 1.0 / (1.0 + np.exp(-layer_output.class_logits.data))
    scores = probs.max(axis=1)
    return [
        ScoredBox(box=layer_output.boxes.data[i].copy(), score=float(scores[i]))
        for i in range(len(scores))
    ]


def bench(detector, scenes, repetitions: int = 3, iou_thresh: float = 0.5) -> list[TimingReport]:
    """Wall-clock comparison of three inference pipelines over the scenes:
    (a) the bare set-prediction forward pass, (b) forward plus per-camera
    suppression, (c) forward plus per-camera plus global suppression.

    The forward pass runs once per scene and its time is shared by all
    variants; each suppression stage is timed on top of it. One warm-up
    sweep is discarded before ``repetitions`` measured sweeps (at least
    3). Run single-worker with no background threads for stable numbers.
    """
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    totals = {"forward": 0.0, "per_camera_nms": 0.0, "global_nms": 0.0}
    n_scenes = len(scenes)
    for rep in range(repetitions + 1):
        sums = {k: 0.0 for k in totals}
        for scene in scenes:
            images = scene.images.astype(np.float64) / 255.0
            t0 = time.perf_counter()
            outputs = detector.forward(images, scene.rig)
            t1 = time.perf_counter()
            boxes = scored_boxes_from_layer(outputs[-1])
            assign_source_cameras(boxes, scene.rig)
            t2 = time.perf_counter()
            survivors = nms_per_camera(boxes, iou_thresh)
            t3 = time.perf_counter()
            nms_global(survivors, iou_thresh)
            t4 = time.perf_counter()
            sums["forward"] += t1 - t0
            sums["per_camera_nms"] += t3 - t2
            sums["global_nms"] += t4 - t3
        if rep == 0:
            continue  # warm-up sweep
        for k in totals:
            totals[k] += sums[k]
    per_scene = {k: v / (repetitions * n_scenes) for k, v in totals.items()}
    fwd, pc, gl = per_scene["forward"], per_scene["per_camera_nms"], per_scene["global_nms"]
    return [
        TimingReport("no_nms", fwd, {"forward": fwd, "nms": 0.0}),
        TimingReport("per_camera_nms", fwd + pc, {"forward": fwd, "nms": pc}),
        TimingReport(
            "per_camera_plus_global_nms", fwd + pc + gl, {"forward": fwd, "nms": pc + gl}
        ),
    ]


def timing_table(reports: list[TimingReport]) -> str:
    lines = [
        f"{'variant':<28s} {'mean s/scene':>12s} {'FPS':>8s} {'forward s':>10s} {'nms s':>8s}",
        "-" * 70,
    ]
    for r in reports:
        lines.append(
            f"{r.variant:<28s} {r.mean_seconds:>12.4f} {r.fps:>8.2f} "
            f"{r.stages['forward']:>10.4f} {r.stages['nms']:>8.4f}"
        )
    return "\n".join(lines)


def write_timing(reports: list[TimingReport], path: str) -> None:
    import json

    payload = [
        {
            "variant": r.variant,
            "mean_seconds": r.mean_seconds,
            "fps": r.fps,
            "stages": r.stages,
        }
        for r in reports
    ]
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
