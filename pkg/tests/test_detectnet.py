"""Backbone, proposal head, RoI sampling, detection head, and loss checks."""

import numpy as np
import pytest

import got.autodiff as ad
from got.config import TrainConfig, backbone_preset, widths_for_preset
from got.detectnet import (
    BACKGROUND,
    DetectionOutput,
    backbone_forward,
    detection_head,
    init_backbone,
    init_detection_head,
    init_rpn,
    label_anchors,
    loss_detection,
    loss_rpn,
    rpn_forward,
    sample_rois,
)
from got.errors import ValidationError
from got.geometry import AnchorGrid, iou_matrix
from gradcheck import assert_gradients_close

TOY = backbone_preset("toy-8ch-s8")
SMALL = backbone_preset("small-32ch-s16")


def toy_backbone(seed=0, dtype=np.float64):
    return init_backbone(TOY, np.random.default_rng(seed), dtype=dtype)


# -- backbone ----------------------------------------------------------------

def test_backbone_output_shape_matches_ceil_division():
    tensors = init_backbone(SMALL, np.random.default_rng(0), dtype=np.float32)
    image = np.random.default_rng(1).uniform(size=(600, 1000, 3)).astype(np.float32)
    fm = backbone_forward(image, tensors, SMALL)
    assert fm.shape == (38, 63, SMALL.out_channels)
    assert SMALL.total_stride == 16


def test_backbone_toy_stride_eight():
    tensors = toy_backbone()
    fm = backbone_forward(np.zeros((64, 48, 3)), tensors, TOY)
    assert fm.shape == (8, 6, 8)


def test_backbone_zero_image_zero_bias_gives_zero_features():
    tensors = toy_backbone(seed=3)
    fm = backbone_forward(np.zeros((16, 16, 3)), tensors, TOY)
    np.testing.assert_allclose(fm.data, 0.0, atol=1e-12)


def test_backbone_rejects_tiny_images():
    tensors = toy_backbone()
    with pytest.raises(ValidationError):
        backbone_forward(np.zeros((4, 64, 3)), tensors, TOY)


def test_backbone_deterministic():
    tensors = toy_backbone(seed=5)
    image = np.random.default_rng(2).uniform(size=(16, 16, 3))
    a = backbone_forward(image, tensors, TOY)
    b = backbone_forward(image, tensors, TOY)
    assert np.array_equal(a.data, b.data)


def test_backbone_gradients_vs_finite_differences():
    tensors = toy_backbone(seed=7)
    image = np.random.default_rng(4).uniform(size=(16, 16, 3))
    weights = ad.Tensor(np.random.default_rng(5).normal(size=(2, 2, 8)))

    def loss():
        return (backbone_forward(image, tensors, TOY) * weights).sum()

    assert_gradients_close(loss, tensors, sample=30)


# -- rpn ------------------------------------------------------------------------

def grid_for(cfg, scales=(1.5, 2.0, 3.0, 4.0)):
    s = cfg.total_stride
    return AnchorGrid(stride=float(s), scales=tuple(x * s for x in scales))


def test_rpn_single_cell_emits_twelve_proposals():
    rng = np.random.default_rng(0)
    tensors = init_rpn(8, 12, rng, dtype=np.float64)
    fm = ad.Tensor(np.random.default_rng(1).normal(size=(1, 1, 8)))
    out = rpn_forward(fm, tensors, grid_for(TOY), image_size=(200, 200))
    assert len(out.proposals()) == 12
    assert out.objectness_logits.shape == (12,)
    assert out.deltas.shape == (12, 4)


def test_rpn_zero_weights_fall_back_to_anchor_order():
    rng = np.random.default_rng(0)
    tensors = init_rpn(8, 12, rng, dtype=np.float64)
    for name in ("rpn/obj/w", "rpn/obj/b", "rpn/box/w", "rpn/box/b"):
        tensors[name].data = np.zeros_like(tensors[name].data)
    fm = ad.Tensor(np.random.default_rng(2).normal(size=(2, 2, 8)))
    out = rpn_forward(fm, tensors, grid_for(TOY), image_size=(300, 300))
    np.testing.assert_array_equal(out.proposal_anchor_index, np.arange(48))


def test_rpn_proposals_lie_within_image():
    rng = np.random.default_rng(3)
    tensors = init_rpn(8, 12, rng, dtype=np.float64)
    fm = ad.Tensor(rng.normal(size=(4, 4, 8)))
    out = rpn_forward(fm, tensors, grid_for(TOY), image_size=(32, 32))
    boxes = out.proposal_boxes
    assert np.all(boxes[:, 0] >= 0) and np.all(boxes[:, 1] >= 0)
    assert np.all(boxes[:, 2] <= 32) and np.all(boxes[:, 3] <= 32)
    assert np.all(boxes[:, 2] > boxes[:, 0]) and np.all(boxes[:, 3] > boxes[:, 1])


def test_rpn_pre_nms_budget_respected():
    rng = np.random.default_rng(4)
    tensors = init_rpn(8, 12, rng, dtype=np.float64)
    fm = ad.Tensor(rng.normal(size=(4, 4, 8)))
    out = rpn_forward(fm, tensors, grid_for(TOY), image_size=(32, 32), pre_nms_top_n=10)
    assert len(out.proposal_boxes) == 10
    assert np.all(np.diff(out.proposal_scores) <= 1e-12)


# -- sample_rois -------------------------------------------------------------------

def test_sample_rois_labels_by_iou():
    gt = np.array([[10.0, 10.0, 30.0, 30.0]])
    labels = np.array([2])
    proposals = np.array([
        [12.0, 10.0, 32.0, 30.0],   # IoU well above 0.5
        [40.0, 40.0, 60.0, 60.0],   # disjoint
        [10.0, 10.0, 30.0, 30.0],   # exact match
    ])
    rois = sample_rois(proposals, gt, labels, n_sample=10, pos_iou=0.5,
                       rng=np.random.default_rng(0), positive_fraction=0.5)
    by_box = {tuple(b): (l, m) for b, l, m in zip(rois.boxes, rois.labels, rois.matched_gt)}
    assert by_box[(12.0, 10.0, 32.0, 30.0)][0] == 2
    assert by_box[(40.0, 40.0, 60.0, 60.0)][0] == BACKGROUND
    assert by_box[(10.0, 10.0, 30.0, 30.0)][0] == 2
    exact = np.flatnonzero([np.allclose(b, gt[0]) for b in rois.boxes])[0]
    np.testing.assert_allclose(rois.regression_targets[exact], 0.0, atol=1e-12)


def test_sample_rois_never_marks_low_iou_positive():
    rng = np.random.default_rng(7)
    for _ in range(30):
        n_gt = int(rng.integers(1, 4))
        gt = np.stack([
            np.array([x, y, x + w, y + h])
            for x, y, w, h in rng.uniform(5, 40, size=(n_gt, 4))
        ])
        labels = rng.integers(0, 3, size=n_gt)
        proposals = np.stack([
            np.array([x, y, x + w, y + h])
            for x, y, w, h in rng.uniform(1, 60, size=(40, 4))
        ])
        rois = sample_rois(proposals, gt, labels, n_sample=16, pos_iou=0.5, rng=rng)
        overlaps = iou_matrix(rois.boxes, gt).max(axis=1)
        assert np.all(overlaps[rois.positive_mask] >= 0.5)
        assert np.all(overlaps[~rois.positive_mask] < 0.5)


def test_sample_rois_positive_cap():
    gt = np.array([[0.0, 0.0, 20.0, 20.0]])
    proposals = np.tile(gt, (50, 1))  # every proposal is a perfect positive
    rois = sample_rois(proposals, gt, np.array([1]), n_sample=16, pos_iou=0.5,
                       rng=np.random.default_rng(1), positive_fraction=0.25)
    assert rois.n_positive == 4
    assert len(rois) == 4  # no negatives exist to fill with


def test_sample_rois_deterministic_given_seed():
    rng_boxes = np.random.default_rng(8)
    proposals = rng_boxes.uniform(0, 40, size=(30, 2))
    proposals = np.concatenate([proposals, proposals + rng_boxes.uniform(2, 20, size=(30, 2))], axis=1)
    gt = np.array([[5.0, 5.0, 25.0, 25.0]])
    a = sample_rois(proposals, gt, np.array([0]), 8, 0.5, np.random.default_rng(42))
    b = sample_rois(proposals, gt, np.array([0]), 8, 0.5, np.random.default_rng(42))
    np.testing.assert_array_equal(a.boxes, b.boxes)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_sample_rois_requires_proposals():
    with pytest.raises(ValidationError):
        sample_rois(np.zeros((0, 4)), np.array([[0, 0, 1, 1.0]]), np.array([0]), 4, 0.5,
                    np.random.default_rng(0))


# -- detection head ---------------------------------------------------------------

def test_detection_head_zero_weights_uniform_scores():
    widths = widths_for_preset("toy")
    rng = np.random.default_rng(0)
    tensors = init_detection_head(widths, 8, 4, rng, dtype=np.float64)
    for name, t in tensors.items():
        t.data = np.zeros_like(t.data)
    pooled = ad.Tensor(np.random.default_rng(1).normal(size=(3, 7, 7, 8)))
    out = detection_head(pooled, tensors, 4)
    assert out.class_logits.shape == (3, 5)
    assert out.box_deltas.shape == (3, 20)
    np.testing.assert_allclose(out.class_scores(), 0.2, atol=1e-12)


def test_detection_head_shape_mismatch():
    widths = widths_for_preset("toy")
    tensors = init_detection_head(widths, 8, 4, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        detection_head(ad.Tensor(np.zeros((2, 7, 7, 5))), tensors, 4)


def test_detection_head_gradients():
    widths = widths_for_preset("toy")
    tensors = init_detection_head(widths, 2, 2, np.random.default_rng(3), dtype=np.float64)
    pooled_data = np.random.default_rng(4).normal(size=(2, 7, 7, 2))
    rois_labels = np.array([0, 1])

    def loss():
        out = detection_head(ad.Tensor(pooled_data), tensors, 2)
        return ad.cross_entropy_logits(out.class_logits, rois_labels).mean() + (out.box_deltas ** 2).mean()

    assert_gradients_close(loss, tensors, sample=25)


# -- losses -------------------------------------------------------------------------

def make_labeled(boxes, labels, matched, targets):
    from got.detectnet import LabeledRoIs

    return LabeledRoIs(np.asarray(boxes, dtype=np.float64), np.asarray(labels),
                       np.asarray(matched), np.asarray(targets, dtype=np.float64))


def test_loss_detection_perfect_predictions_zero():
    rois = make_labeled([[0, 0, 10, 10], [5, 5, 20, 20]], [1, 0], [0, 1],
                        [[0.1, -0.2, 0.05, 0.0], [0.0, 0.0, 0.0, 0.0]])
    logits = np.full((2, 3), -1000.0)
    logits[0, 1] = 1000.0
    logits[1, 0] = 1000.0
    deltas = np.zeros((2, 12))
    deltas[0, 4:8] = [0.1, -0.2, 0.05, 0.0]  # class-1 slot of RoI 0
    out = DetectionOutput(ad.Tensor(logits), ad.Tensor(deltas), n_superclasses=2)
    l_loc, l_superclass = loss_detection(out, rois)
    assert float(l_superclass.data) == 0.0
    assert float(l_loc.data) == 0.0


def test_loss_detection_uniform_is_log_k_plus_one():
    rois = make_labeled([[0, 0, 10, 10]], [2], [0], [[0.0, 0.0, 0.0, 0.0]])
    out = DetectionOutput(ad.Tensor(np.zeros((1, 5))), ad.Tensor(np.zeros((1, 20))), n_superclasses=4)
    _, l_superclass = loss_detection(out, rois)
    assert abs(float(l_superclass.data) - np.log(5)) < 1e-9


def test_loss_detection_no_positives_is_zero():
    rois = make_labeled([[0, 0, 10, 10]], [BACKGROUND], [-1], [[0, 0, 0, 0]])
    out = DetectionOutput(ad.Tensor(np.ones((1, 3))), ad.Tensor(np.ones((1, 12))), n_superclasses=2)
    l_loc, l_superclass = loss_detection(out, rois)
    assert float(l_loc.data) == 0.0 and float(l_superclass.data) == 0.0


# -- anchor labelling / rpn loss -------------------------------------------------------

def test_label_anchors_thresholds():
    anchors = np.array([
        [10.0, 10.0, 30.0, 30.0],   # IoU 1 with gt -> positive
        [11.0, 11.0, 31.0, 31.0],   # IoU 0.82 -> positive
        [60.0, 60.0, 80.0, 80.0],   # disjoint -> negative
        [-5.0, 10.0, 15.0, 30.0],   # sticks out, IoU 0.14 -> still negative
        [14.0, 14.0, 34.0, 34.0],   # IoU 0.47, inside the dead band -> ignored
    ])
    gt = np.array([[10.0, 10.0, 30.0, 30.0]])
    labels, targets = label_anchors(anchors, gt, image_size=(100, 100))
    assert labels[0] == 1
    assert labels[1] == 1
    assert labels[2] == 0
    assert labels[3] == 0
    assert labels[4] == -1
    np.testing.assert_allclose(targets[0], 0.0, atol=1e-12)


def test_label_anchors_best_per_gt_is_positive():
    anchors = np.array([[0.0, 0.0, 8.0, 8.0], [40.0, 40.0, 56.0, 56.0]])
    gt = np.array([[42.0, 42.0, 50.0, 50.0]])  # best anchor IoU < 0.7
    labels, _ = label_anchors(anchors, gt, image_size=(64, 64))
    assert labels[1] == 1


def test_loss_rpn_runs_and_is_finite():
    rng = np.random.default_rng(0)
    tensors = init_rpn(8, 12, rng, dtype=np.float64)
    fm = ad.Tensor(rng.normal(size=(4, 4, 8)))
    out = rpn_forward(fm, tensors, grid_for(TOY), image_size=(32, 32))
    gt = np.array([[8.0, 8.0, 24.0, 24.0]])
    obj_loss, box_loss = loss_rpn(out, gt, (32, 32), np.random.default_rng(1), n_samples=16)
    assert np.isfinite(float(obj_loss.data)) and float(obj_loss.data) > 0
    assert np.isfinite(float(box_loss.data))


def test_full_detection_branch_gradient():
    """End-to-end: backbone -> rpn loss + align -> head -> detection losses."""
    cfg = TOY
    rng = np.random.default_rng(9)
    tensors = {}
    tensors.update(init_backbone(cfg, rng, dtype=np.float64))
    tensors.update(init_rpn(8, 12, rng, dtype=np.float64))
    tensors.update(init_detection_head(widths_for_preset("toy"), 8, 2, rng, dtype=np.float64))
    image = np.random.default_rng(10).uniform(size=(16, 16, 3))
    gt = np.array([[2.0, 2.0, 12.0, 12.0]])
    gt_labels = np.array([1])
    grid = grid_for(cfg)

    from got.geometry import roi_align_batch

    def loss():
        fm = backbone_forward(image, tensors, cfg)
        out = rpn_forward(fm, tensors, grid, image_size=(16, 16))
        obj_l, box_l = loss_rpn(out, gt, (16, 16), np.random.default_rng(3), n_samples=8)
        rois = sample_rois(np.concatenate([out.proposal_boxes[:6], gt]), gt, gt_labels,
                           n_sample=8, pos_iou=0.5, rng=np.random.default_rng(4))
        pooled = roi_align_batch(fm, rois.boxes, 1.0 / 8, 7)
        det = detection_head(pooled, tensors, 2)
        l_loc, l_sup = loss_detection(det, rois)
        return obj_l + box_l + l_loc + l_sup

    assert_gradients_close(loss, tensors, sample=12)
