import itertools

import numpy as np
import pytest

from mvdet import autodiff as ad, head, loss
from mvdet.autodiff import Tensor
from mvdet.head import HeadConfig, LayerOutput
from mvdet.loss import (
    LossConfig,
    NO_OBJECT,
    box_l1,
    focal_loss,
    hungarian,
    l1_box_loss,
    match_cost,
    match_real_rows,
    pad_ground_truth,
    set_loss,
)


def brute_force_min(cost):
    n = cost.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost[j, perm[j]] for j in range(n))
        best = min(best, total)
    return best


# --- padding ---------------------------------------------------------------

def test_pad_identity_when_full():
    boxes = np.arange(18, dtype=float).reshape(2, 9)
    labels = np.array([1, 0])
    b, l = pad_ground_truth(boxes, labels, 2)
    np.testing.assert_array_equal(b, boxes)
    np.testing.assert_array_equal(l, labels)


def test_pad_empty_and_partial():
    b, l = pad_ground_truth(np.zeros((0, 9)), np.zeros(0, dtype=int), 4)
    assert b.shape == (4, 9)
    assert np.all(l == NO_OBJECT)

    boxes = np.ones((3, 9))
    labels = np.array([0, 1, 2])
    b, l = pad_ground_truth(boxes, labels, 5)
    np.testing.assert_array_equal(l, [0, 1, 2, NO_OBJECT, NO_OBJECT])


def test_pad_rejects_overflow():
    with pytest.raises(ValueError):
        pad_ground_truth(np.ones((3, 9)), np.zeros(3, dtype=int), 2)


# --- matching cost ----------------------------------------------------------

def test_match_cost_perfect_prediction_row_minimum():
    gt_box = np.array([1.0, 2.0, 0.5, 1, 1, 1, 0.3, 0, 0])
    preds = np.stack([gt_box, gt_box + 3.0, gt_box - 2.0])
    probs = np.array([[0.99, 0.01], [0.2, 0.8], [0.5, 0.5]])
    b, l = pad_ground_truth(gt_box[None], np.array([0]), 3)
    cost = match_cost(preds, probs, b, l)
    assert cost.shape == (3, 3)
    assert np.argmin(cost[0]) == 0


def test_match_cost_empty_gt_zero_matrix():
    preds = np.random.default_rng(0).normal(size=(4, 9))
    probs = np.full((4, 2), 0.5)
    b, l = pad_ground_truth(np.zeros((0, 9)), np.zeros(0, dtype=int), 4)
    cost = match_cost(preds, probs, b, l)
    np.testing.assert_array_equal(cost, np.zeros((4, 4)))


def test_match_cost_hungarian_vs_bruteforce_4x4():
    rng = np.random.default_rng(1)
    for _ in range(25):
        boxes = rng.normal(size=(4, 9)) * 3
        labels = rng.integers(0, 3, size=4)
        preds = rng.normal(size=(4, 9)) * 3
        probs = rng.uniform(0.01, 0.99, size=(4, 3))
        b, l = pad_ground_truth(boxes, labels, 4)
        cost = match_cost(preds, probs, b, l)
        assign = hungarian(cost)
        assert assign.total_cost == pytest.approx(brute_force_min(cost), abs=1e-10)


# --- hungarian --------------------------------------------------------------

def test_hungarian_two_by_two():
    assign = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    np.testing.assert_array_equal(assign.perm, [0, 1])
    assert assign.total_cost == 2.0


def test_hungarian_diagonal_dominant():
    n = 5
    cost = np.full((n, n), 10.0) + np.random.default_rng(2).uniform(0, 1, (n, n))
    cost[np.arange(n), np.arange(n)] = 0.0
    assign = hungarian(cost)
    np.testing.assert_array_equal(assign.perm, np.arange(n))


def test_hungarian_rejects_nan_and_nonsquare():
    with pytest.raises(ValueError):
        hungarian(np.array([[np.nan, 1.0], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        hungarian(np.ones((2, 3)))


def test_hungarian_injective():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = rng.integers(2, 9)
        assign = hungarian(rng.normal(size=(n, n)))
        assert len(set(assign.perm.tolist())) == n


def test_match_real_rows_equals_padded_hungarian():
    rng = np.random.default_rng(4)
    for _ in range(50):
        m, n = rng.integers(1, 5), rng.integers(5, 9)
        real = rng.normal(size=(m, n))
        padded = np.zeros((n, n))
        padded[:m] = real
        full = hungarian(padded)
        rect = match_real_rows(real)
        assert rect.total_cost == pytest.approx(full.total_cost, abs=1e-12)
        # both must be optimal; with continuous costs the argmin is unique
        np.testing.assert_array_equal(rect.perm, full.perm[:m])


# --- focal loss -------------------------------------------------------------

def test_focal_gamma_zero_is_half_cross_entropy():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 4))
    targets = np.array([0, 2, NO_OBJECT])
    out = focal_loss(Tensor(logits), targets, alpha=0.5, gamma=0.0).item()

    p = 1.0 / (1.0 + np.exp(-logits))
    onehot = np.zeros((3, 4))
    onehot[0, 0] = onehot[1, 2] = 1.0
    ce = -(onehot * np.log(p) + (1 - onehot) * np.log(1 - p)).sum()
    assert out == pytest.approx(0.5 * ce, rel=1e-9)


def test_focal_reference_value():
    # single class, p = 0.5, target positive: 0.25 * 0.25 * ln 2
    logit = np.array([[0.0]])
    out = focal_loss(Tensor(logit), np.array([0]), alpha=0.25, gamma=2.0).item()
    assert out == pytest.approx(0.25 * 0.25 * np.log(2.0), rel=1e-12)
    assert out == pytest.approx(0.04332, abs=5e-6)


def test_focal_vanishes_for_confident_correct():
    logits = np.array([[30.0, -30.0]])
    out = focal_loss(Tensor(logits), np.array([0])).item()
    assert out < 1e-8


def test_focal_parameter_validation():
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.zeros((1, 2))), np.array([0]), alpha=1.5)
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.zeros((1, 2))), np.array([0]), gamma=-1.0)


# --- box L1 -----------------------------------------------------------------

def test_l1_identical_zero():
    b = np.arange(9, dtype=float)
    assert l1_box_loss(b, b) == 0.0


def test_l1_yaw_wrap():
    a = np.zeros(9)
    b = np.zeros(9)
    a[6] = np.pi - 0.1
    b[6] = -np.pi + 0.1
    assert l1_box_loss(a, b) == pytest.approx(0.2 / 9.0, rel=1e-9)


def test_l1_unit_offset_single_param():
    a = np.zeros(9)
    for k in range(9):
        b = np.zeros(9)
        b[k] = 1.0 if k != 6 else 1.0
        assert l1_box_loss(a, b) == pytest.approx(1.0 / 9.0)


# --- set loss ---------------------------------------------------------------

def _fake_outputs(boxes, logits):
    return LayerOutput(
        boxes=Tensor(boxes), class_logits=Tensor(logits), ref_points=np.zeros((len(boxes), 3))
    )


def test_set_loss_perfect_predictions_near_zero():
    rng = np.random.default_rng(6)
    gt_boxes = rng.normal(size=(3, 9))
    gt_boxes[:, 6] = rng.uniform(-3, 3, size=3)
    gt_labels = np.array([0, 1, 2])
    logits = np.full((5, 3), -40.0)
    for i, lab in enumerate(gt_labels):
        logits[i, lab] = 40.0
    boxes = np.vstack([gt_boxes, rng.normal(size=(2, 9))])
    out = _fake_outputs(boxes, logits)
    breakdown, assigns = set_loss([out], gt_boxes, gt_labels)
    assert float(breakdown.total.data) < 1e-6
    np.testing.assert_array_equal(np.sort(assigns[0].perm), [0, 1, 2])


def test_set_loss_gt_permutation_invariance():
    rng = np.random.default_rng(7)
    for seed in range(20):
        r = np.random.default_rng(seed)
        gt_boxes = r.normal(size=(4, 9)) * 2
        gt_labels = r.integers(0, 3, size=4)
        boxes = r.normal(size=(8, 9)) * 2
        logits = r.normal(size=(8, 3))
        out = _fake_outputs(boxes, logits)
        base, _ = set_loss([out], gt_boxes, gt_labels)
        perm = r.permutation(4)
        permuted, _ = set_loss([out], gt_boxes[perm], gt_labels[perm])
        assert float(permuted.total.data) == pytest.approx(
            float(base.total.data), abs=1e-12
        )


def test_set_loss_breakdown_consistency():
    rng = np.random.default_rng(8)
    gt_boxes = rng.normal(size=(2, 9))
    gt_labels = np.array([0, 1])
    outs = [
        _fake_outputs(rng.normal(size=(6, 9)), rng.normal(size=(6, 3)))
        for _ in range(3)
    ]
    breakdown, _ = set_loss(outs, gt_boxes, gt_labels)
    assert len(breakdown.per_layer) == 3
    assert float(breakdown.total.data) == pytest.approx(sum(breakdown.per_layer), rel=1e-12)
    assert breakdown.cls_part >= 0.0
    assert breakdown.box_part >= 0.0
    assert breakdown.cls_part + breakdown.box_part == pytest.approx(
        float(breakdown.total.data), rel=1e-12
    )


def test_set_loss_empty_ground_truth():
    rng = np.random.default_rng(9)
    out = _fake_outputs(rng.normal(size=(4, 9)), rng.normal(size=(4, 2)))
    breakdown, assigns = set_loss([out], np.zeros((0, 9)), np.zeros(0, dtype=int))
    assert float(breakdown.total.data) > 0.0  # negatives still supervised
    assert breakdown.box_part == 0.0
    assert assigns[0].perm.size == 0


def test_set_loss_gradient_vs_fd():
    rng = np.random.default_rng(10)
    gt_boxes = rng.normal(size=(2, 9)) * 2
    gt_labels = np.array([1, 0])
    boxes0 = rng.normal(size=(3, 9))
    logits0 = rng.normal(size=(3, 2))

    base_out = _fake_outputs(boxes0, logits0)
    _, frozen = set_loss([base_out], gt_boxes, gt_labels)

    def f_boxes(t):
        out = LayerOutput(boxes=t, class_logits=Tensor(logits0), ref_points=None)
        bd, _ = set_loss([out], gt_boxes, gt_labels, frozen_assignments=frozen)
        return bd.total

    def f_logits(t):
        out = LayerOutput(boxes=Tensor(boxes0), class_logits=t, ref_points=None)
        bd, _ = set_loss([out], gt_boxes, gt_labels, frozen_assignments=frozen)
        return bd.total

    assert ad.grad_check(f_boxes, Tensor(boxes0)) < 1e-4
    assert ad.grad_check(f_logits, Tensor(logits0)) < 1e-4


def test_box_param_weights_scale_box_term():
    rng = np.random.default_rng(11)
    gt_boxes = rng.normal(size=(2, 9))
    gt_labels = np.array([0, 1])
    out = _fake_outputs(rng.normal(size=(4, 9)), rng.normal(size=(4, 2)))
    plain, _ = set_loss([out], gt_boxes, gt_labels, LossConfig())
    weighted, _ = set_loss(
        [out], gt_boxes, gt_labels, LossConfig(box_param_weights=(2.0,) * 9)
    )
    assert weighted.box_part == pytest.approx(2.0 * plain.box_part, rel=1e-9)


def test_box_l1_broadcasts():
    a = np.zeros((5, 9))
    b = np.zeros(9)
    b[0] = 9.0
    np.testing.assert_allclose(box_l1(a, b), np.ones(5))
