"""Set-to-set training objective.

Per layer: ground truth is padded with no-object entries up to the query
count, an optimal one-to-one assignment between ground truths and
predictions is solved on a class-probability + box-distance cost, and
the loss is a sigmoid focal term over every prediction (matched ones
toward their class, the rest toward all-negative) plus a weighted L1
over matched box parameters. Layer losses are summed. The assignment is
a hard decision: gradients flow through the predictions only.

The matching cost gates the box distance to real ground-truth rows (a
no-object row costs the same against every prediction), and the box L1
supervises matched real objects only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import wrap_angle

NO_OBJECT = -1

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda_box: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # per-parameter weights inside the 9-dim box L1 (kept uniform by default)
    box_param_weights: tuple = (1.0,) * 9


@dataclass(frozen=True)
class Assignment:
    """Injective map from ground-truth row j to prediction index perm[j]."""

    perm: np.ndarray  # (n,) int
    total_cost: float


@dataclass
class LossBreakdown:
    total: Tensor  # scalar, differentiable
    per_layer: list[float] = field(default_factory=list)
    cls_part: float = 0.0
    box_part: float = 0.0


def pad_ground_truth(gt_boxes, gt_labels, num_queries: int):
    """Pad (M, 9) boxes / (M,) labels to the query count with no-object rows."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 9)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    m = gt_boxes.shape[0]
    if m > num_queries:
        raise ValueError(f"{m} ground-truth boxes exceed {num_queries} queries")
    boxes = np.zeros((num_queries, 9))
    boxes[:m] = gt_boxes
    labels = np.full(num_queries, NO_OBJECT, dtype=np.int64)
    labels[:m] = gt_labels
    return boxes, labels


def box_l1(a, b, weights=None) -> np.ndarray:
    """Mean absolute difference over the 9 box parameters, yaw wrapped.

    Broadcasts over leading dimensions; returns the per-pair means.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a - b
    d = np.concatenate([d[..., :6], wrap_angle(d[..., 6:7]), d[..., 7:]], axis=-1)
    d = np.abs(d)
    if weights is not None:
        d = d * np.asarray(weights, dtype=np.float64)
    return d.mean(axis=-1)


def l1_box_loss(b, b_hat) -> float:
    """Scalar box L1 between two 9-parameter boxes."""
    return float(box_l1(np.asarray(b).reshape(9), np.asarray(b_hat).reshape(9)))


def match_cost(
    pred_boxes: np.ndarray,
    pred_probs: np.ndarray,
    gt_boxes_padded: np.ndarray,
    gt_labels_padded: np.ndarray,
    lambda_box: float = 0.25,
    box_param_weights=None,
) -> np.ndarray:
    """Cost matrix, rows = padded ground truths, cols = predictions.

    Real rows cost minus the prediction's probability of the true class
    plus the weighted box L1; no-object rows cost zero everywhere.
    """
    n = pred_boxes.shape[0]
    cost = np.zeros((gt_boxes_padded.shape[0], n))
    real = np.flatnonzero(gt_labels_padded != NO_OBJECT)
    for j in real:
        l1 = box_l1(gt_boxes_padded[j], pred_boxes, weights=box_param_weights)
        cost[j] = -pred_probs[:, gt_labels_padded[j]] + lambda_box * l1
    return cost


def _real_row_cost(pred_boxes, pred_probs, gt_boxes, gt_labels, lambda_box, weights):
    cost = np.empty((gt_boxes.shape[0], pred_boxes.shape[0]))
    for j in range(gt_boxes.shape[0]):
        l1 = box_l1(gt_boxes[j], pred_boxes, weights=weights)
        cost[j] = -pred_probs[:, gt_labels[j]] + lambda_box * l1
    return cost


def _shortest_path_assignment(cost: np.ndarray) -> np.ndarray:
    """Row-to-column map minimizing total cost for an (nr, nc) matrix with
    nr <= nc; shortest-augmenting-path with dual potentials, O(nr^2 nc).
    Ties break toward the lowest column index (deterministic)."""
    nr, nc = cost.shape
    u = np.zeros(nr + 1)
    v = np.zeros(nc + 1)
    assigned = np.zeros(nc + 1, dtype=np.intp)  # column -> row (1-based, 0 = free)
    way = np.zeros(nc + 1, dtype=np.intp)

    for i in range(1, nr + 1):
        assigned[0] = i
        j0 = 0
        minv = np.full(nc + 1, np.inf)
        used = np.zeros(nc + 1, dtype=bool)
        used_cols = []
        while True:
            used[j0] = True
            used_cols.append(j0)
            i0 = assigned[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            if better.any():
                minv[1:][better] = cur[better]
                way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            if not np.isfinite(delta):
                raise RuntimeError("augmenting path search stalled")
            cols = np.array(used_cols, dtype=np.intp)
            u[assigned[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if assigned[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            assigned[j0] = assigned[j1]
            j0 = j1

    row_to_col = np.empty(nr, dtype=np.intp)
    for j in range(1, nc + 1):
        if assigned[j]:
            row_to_col[assigned[j] - 1] = j - 1
    return row_to_col


def hungarian(cost) -> Assignment:
    """Minimum-cost perfect matching on a square matrix, O(n^3)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    n = cost.shape[0]
    row_to_col = _shortest_path_assignment(cost)
    total = float(cost[np.arange(n), row_to_col].sum())
    return Assignment(perm=row_to_col, total_cost=total)


def match_real_rows(cost_real: np.ndarray) -> Assignment:
    """Optimal injective assignment of real ground-truth rows to predictions.

    Equivalent to ``hungarian`` on the full padded matrix restricted to
    the real rows: padded rows cost zero against every prediction, so the
    padded optimum is exactly the optimum over the real rows.
    """
    cost_real = np.asarray(cost_real, dtype=np.float64)
    if np.isnan(cost_real).any():
        raise ValueError("cost matrix contains NaN")
    if cost_real.shape[0] == 0:
        return Assignment(perm=np.empty(0, dtype=np.intp), total_cost=0.0)
    perm = _shortest_path_assignment(cost_real)
    total = float(cost_real[np.arange(cost_real.shape[0]), perm].sum())
    return Assignment(perm=perm, total_cost=total)


def focal_loss(
    logits: Tensor,
    target_class,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Sigmoid focal loss summed over all (prediction, class) entries.

    ``target_class`` holds one class index per row, or NO_OBJECT for rows
    supervised toward all-negative. Probabilities are clamped away from
    {0, 1} before the logs.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    targets = np.asarray(target_class, dtype=np.int64).reshape(-1)
    n, c = logits.data.shape
    onehot = np.zeros((n, c))
    real = targets != NO_OBJECT
    onehot[np.flatnonzero(real), targets[real]] = 1.0

    p = ad.clip(ad.sigmoid(logits), PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = ad.mul(ad.pow_const(ad.sub(1.0, p), gamma), ad.log(p))
    neg = ad.mul(ad.pow_const(p, gamma), ad.log(ad.sub(1.0, p)))
    terms = ad.add(ad.mul(pos, alpha * onehot), ad.mul(neg, (1.0 - alpha) * (1.0 - onehot)))
    return ad.neg(ad.reduce_sum(terms))


def _wrap_yaw_column(col: Tensor) -> Tensor:
    turns = np.floor((col.data + np.pi) / (2.0 * np.pi))
    wrapped = ad.sub(col, 2.0 * np.pi * turns)
    at_edge = (wrapped.data <= -np.pi).astype(np.float64)
    if at_edge.any():
        wrapped = ad.add(wrapped, 2.0 * np.pi * at_edge)
    return wrapped


def matched_box_l1(pred_boxes: Tensor, gt_boxes: np.ndarray, pred_idx, weights=None) -> Tensor:
    """Differentiable summed box L1 between selected predictions and ground
    truths (sum over pairs of the per-pair 9-parameter weighted mean)."""
    sel = ad.gather(pred_boxes, np.asarray(pred_idx, dtype=np.intp))
    d = ad.sub(sel, np.asarray(gt_boxes, dtype=np.float64))
    yaw = _wrap_yaw_column(ad.getitem(d, (slice(None), slice(6, 7))))
    d = ad.concat(
        [ad.getitem(d, (slice(None), slice(0, 6))), yaw, ad.getitem(d, (slice(None), slice(7, 9)))],
        axis=1,
    )
    d = ad.absolute(d)
    w = np.ones(9) if weights is None else np.asarray(weights, dtype=np.float64)
    return ad.reduce_sum(ad.mul(d, w / 9.0))


def set_loss(
    layer_outputs,
    gt_boxes,
    gt_labels,
    config: LossConfig = LossConfig(),
    frozen_assignments=None,
):
    """Total training loss over all layers.

    Returns a LossBreakdown whose ``total`` is the differentiable scalar.
    Each layer is normalized by the number of real ground-truth objects
    (1 when the scene is empty). ``frozen_assignments`` (one Assignment
    per layer) bypasses matching, used by gradient checks so that finite
    differences and the analytic gradient see the same assignment.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 9)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    m_real = gt_boxes.shape[0]
    norm = 1.0 / max(1, m_real)

    per_layer: list[float] = []
    cls_total = 0.0
    box_total = 0.0
    pieces = []
    assignments: list[Assignment] = []
    for li, out in enumerate(layer_outputs):
        num_queries = out.boxes.data.shape[0]
        if m_real > num_queries:
            raise ValueError(f"{m_real} ground-truth boxes exceed {num_queries} queries")
        if frozen_assignments is not None:
            assign = frozen_assignments[li]
        else:
            probs = 1.0 / (1.0 + np.exp(-out.class_logits.data))
            cost = _real_row_cost(
                out.boxes.data, probs, gt_boxes, gt_labels,
                config.lambda_box, config.box_param_weights,
            )
            assign = match_real_rows(cost)
        assignments.append(assign)

        targets = np.full(num_queries, NO_OBJECT, dtype=np.int64)
        if m_real:
            targets[assign.perm[:m_real]] = gt_labels
        cls_term = ad.mul(
            focal_loss(out.class_logits, targets, config.focal_alpha, config.focal_gamma),
            norm,
        )
        layer_term = cls_term
        box_val = 0.0
        if m_real:
            box_term = ad.mul(
                matched_box_l1(
                    out.boxes, gt_boxes, assign.perm[:m_real], weights=config.box_param_weights
                ),
                config.lambda_box * norm,
            )
            layer_term = ad.add(cls_term, box_term)
            box_val = float(box_term.data)
        pieces.append(layer_term)
        per_layer.append(float(layer_term.data))
        cls_total += float(cls_term.data)
        box_total += box_val

    total = pieces[0] if len(pieces) == 1 else ad.add_n(pieces)
    breakdown = LossBreakdown(
        total=total, per_layer=per_layer, cls_part=cls_total, box_part=box_total
    )
    return breakdown, assignments


def matched_l1_per_layer(layer_outputs, gt_boxes, gt_labels, config: LossConfig = LossConfig()):
    """Mean matched box L1 per layer (plain numbers, no gradients).

    The per-layer assignment is recomputed exactly as in training.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 9)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    m_real = gt_boxes.shape[0]
    means = []
    for out in layer_outputs:
        if m_real == 0:
            means.append(0.0)
            continue
        probs = 1.0 / (1.0 + np.exp(-out.class_logits.data))
        cost = _real_row_cost(
            out.boxes.data, probs, gt_boxes, gt_labels,
            config.lambda_box, config.box_param_weights,
        )
        assign = match_real_rows(cost)
        sel = out.boxes.data[assign.perm]
        means.append(float(box_l1(gt_boxes, sel).mean()))
    return means
