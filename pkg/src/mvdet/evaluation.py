"""Distance-matched detection metrics and the composite score.

Predictions are greedily matched to ground truths per scene and class by
BEV center distance, in descending confidence order. Average precision
integrates the interpolated precision/recall curve over recall in
[0.1, 1.0] with a 10% precision floor (contributions below either floor
are removed, and the result is renormalized by 0.9). True-positive error
metrics are plain means over the pairs matched at the TP distance:
translation (BEV distance), scale (1 - IoU of center/yaw-aligned boxes),
orientation (absolute wrapped yaw difference), velocity (L2) and
attribute (1 - accuracy); a class with no matches scores 1.0 on each.
The composite detection score is

    NDS = (5 * mAP + sum over the five errors of (1 - min(1, err))) / 10.

The overlap protocol restricts evaluation to ground truths whose center
is visible to at least two cameras; predictions of the same class within
the TP radius of a removed ground truth are dropped rather than counted
as false positives (a documented choice).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import wrap_angle
from .geometry import visible_camera_count
from .synth import class_attribute


@dataclass(frozen=True)
class EvalConfig:
    distance_thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    classes: tuple = (0, 1, 2, 3)
    min_recall: float = 0.1
    min_precision: float = 0.1

    def __post_init__(self):
        th = self.distance_thresholds
        if any(t <= 0 for t in th) or list(th) != sorted(th):
            raise ValueError("distance thresholds must be positive and ascending")


@dataclass
class DetectionRecord:
    scene_id: str
    label: int
    attribute: int
    score: float
    box: np.ndarray  # (9,)


@dataclass
class EvalReport:
    mAP: float
    mATE: float
    mASE: float
    mAOE: float
    mAVE: float
    mAAE: float
    NDS: float | None
    per_class: dict = field(default_factory=dict)
    num_gt: int = 0
    notes: list = field(default_factory=list)

    def tp_errors(self):
        return (self.mATE, self.mASE, self.mAOE, self.mAVE, self.mAAE)


def detections_from_layer(layer_output, scene_id: str) -> list[DetectionRecord]:
    """One record per query: argmax class, its probability as the score,
    and the class-derived attribute."""
    logits = layer_output.class_logits.data
    probs = 1.0 / (1.0 + np.exp(-logits))
    labels = probs.argmax(axis=1)
    out = []
    for i, label in enumerate(labels):
        out.append(
            DetectionRecord(
                scene_id=scene_id,
                label=int(label),
                attribute=class_attribute(int(label)),
                score=float(probs[i, label]),
                box=layer_output.boxes.data[i].copy(),
            )
        )
    return out


def records_from_scene(scene, scene_id: str) -> list[DetectionRecord]:
    """Ground-truth records of a synthetic scene (score pinned to 1)."""
    return [
        DetectionRecord(
            scene_id=scene_id,
            label=int(lab),
            attribute=int(attr),
            score=1.0,
            box=np.asarray(box, dtype=np.float64),
        )
        for box, lab, attr in zip(scene.boxes, scene.labels, scene.attributes)
    ]


def match_by_center_distance(preds, gts, threshold: float):
    """Greedy matching of score-descending predictions to ground truths.

    ``preds`` must already be sorted by descending score. Each ground
    truth matches at most once; a prediction takes the nearest free
    ground truth within the BEV distance threshold. Returns (flags,
    pairs): one TP flag per prediction, and (pred_index, gt_index) pairs.
    """
    taken = np.zeros(len(gts), dtype=bool)
    flags = []
    pairs = []
    gt_xy = np.array([g.box[:2] for g in gts]).reshape(-1, 2)
    for pi, p in enumerate(preds):
        best, best_d = -1, threshold
        if len(gts):
            d = np.hypot(gt_xy[:, 0] - p.box[0], gt_xy[:, 1] - p.box[1])
            d = np.where(taken, np.inf, d)
            j = int(np.argmin(d))
            if d[j] <= best_d:
                best = j
        if best >= 0:
            taken[best] = True
            flags.append(True)
            pairs.append((pi, best))
        else:
            flags.append(False)
    return flags, pairs


def average_precision(flags, num_gt: int, min_recall: float = 0.1, min_precision: float = 0.1) -> float:
    """Normalized area under the interpolated PR curve.

    ``flags`` are TP markers in global descending-score order. Precision
    is interpolated onto 101 recall points; bins at or below the recall
    floor are discarded, the precision floor is subtracted, and the mean
    is renormalized so a perfect detector scores 1.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0 or not flags.any():
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / (tp + fp)
    recall = tp / num_gt
    grid = np.linspace(0.0, 1.0, 101)
    interp = np.interp(grid, recall, precision, right=0.0)
    start = round(100 * min_recall) + 1
    clipped = np.maximum(interp[start:] - min_precision, 0.0)
    return float(clipped.mean() / (1.0 - min_precision))


def aligned_size_iou(size_a, size_b) -> float:
    """IoU of two boxes whose centers and headings are made to coincide."""
    size_a = np.asarray(size_a, dtype=np.float64)
    size_b = np.asarray(size_b, dtype=np.float64)
    inter = float(np.prod(np.minimum(size_a, size_b)))
    union = float(np.prod(size_a) + np.prod(size_b) - inter)
    return inter / union if union > 0 else 0.0


def tp_metrics(matched_pairs) -> tuple[float, float, float, float, float]:
    """(ATE, ASE, AOE, AVE, AAE) over (prediction, ground-truth) pairs.

    Each defaults to 1.0 when there are no pairs.
    """
    if not matched_pairs:
        return (1.0, 1.0, 1.0, 1.0, 1.0)
    ate = ase = aoe = ave = aae = 0.0
    for pred, gt in matched_pairs:
        ate += float(np.hypot(pred.box[0] - gt.box[0], pred.box[1] - gt.box[1]))
        ase += 1.0 - aligned_size_iou(pred.box[3:6], gt.box[3:6])
        aoe += abs(wrap_angle(pred.box[6] - gt.box[6]))
        ave += float(np.hypot(pred.box[7] - gt.box[7], pred.box[8] - gt.box[8]))
        aae += 0.0 if pred.attribute == gt.attribute else 1.0
    n = len(matched_pairs)
    return (ate / n, ase / n, aoe / n, ave / n, aae / n)


def nds(map_value: float, tp_errors) -> float:
    """Composite score: (5 mAP + sum of (1 - min(1, err))) / 10."""
    total = 5.0 * map_value
    for err in tp_errors:
        total += 1.0 - min(1.0, float(err))
    return total / 10.0


def overlap_filter(gts, rig):
    """Ground truths whose box center at least two cameras can see."""
    return [g for g in gts if visible_camera_count(rig, g.box[:3]) >= 2]


def _sort_preds(preds):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    return [preds[i] for i in order]


def evaluate(
    preds_by_scene: dict,
    gts_by_scene: dict,
    config: EvalConfig = EvalConfig(),
    rigs: dict | None = None,
    overlap_only: bool = False,
) -> EvalReport:
    """Aggregate metrics over scenes.

    ``preds_by_scene`` and ``gts_by_scene`` map scene id to record lists.
    Rankings pool across scenes per class; matching stays within a scene.
    ``overlap_only`` needs ``rigs`` (scene id to camera list) and applies
    the overlap protocol described in the module docstring.
    """
    notes = []
    scene_ids = sorted(set(preds_by_scene) | set(gts_by_scene))
    known = set(config.classes)
    for sid in scene_ids:
        for rec in list(preds_by_scene.get(sid, [])) + list(gts_by_scene.get(sid, [])):
            if rec.label not in known:
                raise ValueError(f"unknown class label {rec.label} in scene {sid}")

    gts = {sid: list(gts_by_scene.get(sid, [])) for sid in scene_ids}
    preds = {sid: _sort_preds(list(preds_by_scene.get(sid, []))) for sid in scene_ids}

    if overlap_only:
        if rigs is None:
            raise ValueError("overlap_only evaluation requires camera rigs")
        removed: dict[str, list] = {}
        for sid in scene_ids:
            kept = overlap_filter(gts[sid], rigs[sid])
            kept_ids = {id(g) for g in kept}
            removed[sid] = [g for g in gts[sid] if id(g) not in kept_ids]
            gts[sid] = kept
        for sid in scene_ids:
            if not removed[sid]:
                continue
            kept_preds = []
            for p in preds[sid]:
                near_removed = any(
                    g.label == p.label
                    and np.hypot(p.box[0] - g.box[0], p.box[1] - g.box[1]) <= config.tp_threshold
                    for g in removed[sid]
                )
                if not near_removed:
                    kept_preds.append(p)
            preds[sid] = kept_preds
        if sum(len(v) for v in gts.values()) == 0:
            notes.append("overlap subset is empty; NDS undefined")

    num_gt_total = sum(len(v) for v in gts.values())
    per_class: dict = {}
    ap_values = []
    tp_sums = np.zeros(5)
    classes_counted = 0
    for cls in config.classes:
        cls_gts = {sid: [g for g in gts[sid] if g.label == cls] for sid in scene_ids}
        cls_preds = {sid: [p for p in preds[sid] if p.label == cls] for sid in scene_ids}
        n_gt = sum(len(v) for v in cls_gts.values())
        n_pred = sum(len(v) for v in cls_preds.values())
        if n_gt == 0 and n_pred == 0:
            # class absent from this evaluation entirely; not averaged
            per_class[cls] = {"ap": None, "tp_errors": None, "num_gt": 0}
            continue
        classes_counted += 1

        aps = {}
        for th in config.distance_thresholds:
            scored_flags = []
            for sid in scene_ids:
                flags, _ = match_by_center_distance(cls_preds[sid], cls_gts[sid], th)
                scored_flags.extend(
                    (p.score, i_local, f)
                    for i_local, (p, f) in enumerate(zip(cls_preds[sid], flags))
                )
            scored_flags.sort(key=lambda t: (-t[0], t[1]))
            flags_global = [f for _, _, f in scored_flags]
            aps[th] = average_precision(
                flags_global, n_gt, config.min_recall, config.min_precision
            )

        pairs = []
        for sid in scene_ids:
            _, scene_pairs = match_by_center_distance(
                cls_preds[sid], cls_gts[sid], config.tp_threshold
            )
            pairs.extend((cls_preds[sid][pi], cls_gts[sid][gi]) for pi, gi in scene_pairs)
        errors = tp_metrics(pairs)

        per_class[cls] = {"ap": aps, "tp_errors": errors, "num_gt": n_gt}
        ap_values.extend(aps.values())
        tp_sums += np.array(errors)

    map_value = float(np.mean(ap_values)) if ap_values else 0.0
    tp_means = tp_sums / classes_counted if classes_counted else np.ones(5)
    score = None if (overlap_only and num_gt_total == 0) else nds(map_value, tp_means)
    return EvalReport(
        mAP=map_value,
        mATE=float(tp_means[0]),
        mASE=float(tp_means[1]),
        mAOE=float(tp_means[2]),
        mAVE=float(tp_means[3]),
        mAAE=float(tp_means[4]),
        NDS=score,
        per_class=per_class,
        num_gt=num_gt_total,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# result files (format documented in docs/FORMATS.md)


def write_records(records, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("mvdet-results 1\n")
        for r in records:
            vals = " ".join(format(float(x), ".17g") for x in r.box)
            fh.write(
                f"box {r.scene_id} {int(r.label)} {int(r.attribute)} "
                f"{format(float(r.score), '.17g')} {vals}\n"
            )


def read_records(path: str) -> dict[str, list[DetectionRecord]]:
    out: dict[str, list[DetectionRecord]] = {}
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if header != ["mvdet-results", "1"]:
            raise ValueError(f"{path}: not a results file")
        for ln in fh:
            tok = ln.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] != "box" or len(tok) != 14:
                raise ValueError(f"{path}: malformed record: {ln!r}")
            rec = DetectionRecord(
                scene_id=tok[1],
                label=int(tok[2]),
                attribute=int(tok[3]),
                score=float(tok[4]),
                box=np.array([float(x) for x in tok[5:14]]),
            )
            out.setdefault(rec.scene_id, []).append(rec)
    return out


def report_table(report: EvalReport) -> str:
    rows = [
        ("mAP", report.mAP),
        ("mATE", report.mATE),
        ("mASE", report.mASE),
        ("mAOE", report.mAOE),
        ("mAVE", report.mAVE),
        ("mAAE", report.mAAE),
    ]
    lines = ["metric  value", "-" * 20]
    lines += [f"{name:<7s} {val:.4f}" for name, val in rows]
    lines.append(f"{'NDS':<7s} " + ("undefined" if report.NDS is None else f"{report.NDS:.4f}"))
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def write_report(report: EvalReport, txt_path: str, json_path: str) -> None:
    with open(txt_path, "w", encoding="ascii") as fh:
        fh.write(report_table(report) + "\n")
    payload = {
        "mAP": report.mAP,
        "mATE": report.mATE,
        "mASE": report.mASE,
        "mAOE": report.mAOE,
        "mAVE": report.mAVE,
        "mAAE": report.mAAE,
        "NDS": report.NDS,
        "num_gt": report.num_gt,
        "notes": report.notes,
        "per_class": {
            str(cls): {
                "ap": None if info["ap"] is None else {str(th): v for th, v in info["ap"].items()},
                "tp_errors": None if info["tp_errors"] is None else list(info["tp_errors"]),
                "num_gt": info["num_gt"],
            }
            for cls, info in report.per_class.items()
        },
    }
    with open(json_path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
