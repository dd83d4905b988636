"""First branch: convolutional backbone, region-proposal head, RoI sampling,
and the superclass classification + box regression head with its losses.

Proposal boxes are decoded outside the autodiff graph (gradients flow to the
proposal head only through its objectness/delta losses, not through box
coordinates), which is the usual approximate joint training scheme for this
detector family.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import BackboneConfig, ModelWidths
from .errors import ValidationError
from .geometry import AnchorGrid, clip_boxes, decode_deltas, encode_deltas, generate_anchors, iou_matrix

BACKGROUND = -1  # label value for negative RoIs


def glorot_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    fan_out = int(shape[-1])
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape).astype(dtype)


def init_linear(rng, n_in, n_out, dtype=np.float32) -> tuple[ad.Tensor, ad.Tensor]:
    return (ad.parameter(glorot_uniform(rng, (n_in, n_out), dtype)),
            ad.parameter(np.zeros(n_out, dtype=dtype)))


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, ad.Tensor]:
    tensors: dict[str, ad.Tensor] = {}
    c_in = 3
    for i, (c_out, _) in enumerate(zip(cfg.channels, cfg.strides)):
        tensors[f"backbone/conv{i}/w"] = ad.parameter(
            glorot_uniform(rng, (cfg.kernel, cfg.kernel, c_in, c_out), dtype))
        tensors[f"backbone/conv{i}/b"] = ad.parameter(np.zeros(c_out, dtype=dtype))
        c_in = c_out
    return tensors


def backbone_forward(image, tensors: dict[str, ad.Tensor], cfg: BackboneConfig) -> ad.Tensor:
    """Image (H, W, 3) in [0, 1] -> feature map (ceil(H/stride), ceil(W/stride), C)."""
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(np.asarray(image))
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError(f"backbone expects an HxWx3 image, got {x.shape}")
    if x.shape[0] < cfg.total_stride or x.shape[1] < cfg.total_stride:
        raise ValidationError(
            f"image {x.shape[1]}x{x.shape[0]} smaller than one stride cell ({cfg.total_stride})")
    act = ad.relu if cfg.nonlinearity == "relu" else ad.tanh
    for i, stride in enumerate(cfg.strides):
        x = act(ad.conv2d(x, tensors[f"backbone/conv{i}/w"], tensors[f"backbone/conv{i}/b"], stride=stride))
    return x


# ---------------------------------------------------------------------------
# region proposal head
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Proposal:
    box: tuple[float, float, float, float]
    objectness: float


@dataclass
class RpnOutput:
    """Raw per-anchor tensors plus decoded, clipped, score-sorted proposals."""

    anchors: np.ndarray              # (N, 4)
    objectness_logits: ad.Tensor     # (N,)
    deltas: ad.Tensor                # (N, 4)
    proposal_boxes: np.ndarray       # (M, 4), descending objectness
    proposal_scores: np.ndarray      # (M,) sigmoid objectness
    proposal_anchor_index: np.ndarray  # (M,)

    def proposals(self) -> list[Proposal]:
        return [Proposal(tuple(float(v) for v in b), float(s))
                for b, s in zip(self.proposal_boxes, self.proposal_scores)]


def init_rpn(c_in: int, anchors_per_cell: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, ad.Tensor]:
    tensors = {}
    tensors["rpn/conv/w"] = ad.parameter(glorot_uniform(rng, (3, 3, c_in, c_in), dtype))
    tensors["rpn/conv/b"] = ad.parameter(np.zeros(c_in, dtype=dtype))
    tensors["rpn/obj/w"] = ad.parameter(glorot_uniform(rng, (1, 1, c_in, anchors_per_cell), dtype))
    tensors["rpn/obj/b"] = ad.parameter(np.zeros(anchors_per_cell, dtype=dtype))
    tensors["rpn/box/w"] = ad.parameter(glorot_uniform(rng, (1, 1, c_in, anchors_per_cell * 4), dtype))
    tensors["rpn/box/b"] = ad.parameter(np.zeros(anchors_per_cell * 4, dtype=dtype))
    return tensors


def rpn_forward(
    feature_map: ad.Tensor,
    tensors: dict[str, ad.Tensor],
    grid: AnchorGrid,
    image_size: tuple[int, int],
    pre_nms_top_n: int | None = None,
) -> RpnOutput:
    """Per-anchor objectness and deltas; proposals decoded and clipped to the
    image, degenerate boxes dropped, sorted by objectness (ties: anchor order)."""
    fh, fw, _ = feature_map.shape
    hidden = ad.relu(ad.conv2d(feature_map, tensors["rpn/conv/w"], tensors["rpn/conv/b"], stride=1))
    a = grid.anchors_per_cell
    obj = ad.conv2d(hidden, tensors["rpn/obj/w"], tensors["rpn/obj/b"], stride=1)
    box = ad.conv2d(hidden, tensors["rpn/box/w"], tensors["rpn/box/b"], stride=1)
    n = fh * fw * a
    obj_flat = ad.reshape(obj, (n,))
    box_flat = ad.reshape(box, (n, 4))
    anchors = generate_anchors(grid, fh, fw)

    boxes = decode_deltas(anchors, box_flat.data.astype(np.float64))
    boxes = clip_boxes(boxes, image_size)
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    valid = (widths > 1e-3) & (heights > 1e-3)
    idx = np.flatnonzero(valid)
    logits = obj_flat.data[idx]
    order = np.lexsort((idx, -logits))
    idx = idx[order]
    if pre_nms_top_n is not None:
        idx = idx[:pre_nms_top_n]
    scores = 1.0 / (1.0 + np.exp(-obj_flat.data[idx].astype(np.float64)))
    return RpnOutput(
        anchors=anchors,
        objectness_logits=obj_flat,
        deltas=box_flat,
        proposal_boxes=boxes[idx],
        proposal_scores=scores,
        proposal_anchor_index=idx,
    )


# ---------------------------------------------------------------------------
# RoI sampling
# ---------------------------------------------------------------------------

@dataclass
class LabeledRoIs:
    """Sampled training RoIs: positives carry their matched object and
    regression target; negatives have label BACKGROUND and no match."""

    boxes: np.ndarray            # (n, 4)
    labels: np.ndarray           # (n,) superclass id, BACKGROUND for negatives
    matched_gt: np.ndarray       # (n,) ground-truth object index, -1 for negatives
    regression_targets: np.ndarray  # (n, 4), zeros for negatives

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels != BACKGROUND

    @property
    def n_positive(self) -> int:
        return int(self.positive_mask.sum())

    def __len__(self) -> int:
        return len(self.boxes)


def sample_rois(
    proposal_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    n_sample: int,
    pos_iou: float,
    rng: np.random.Generator,
    positive_fraction: float = 0.25,
) -> LabeledRoIs:
    """Label proposals against ground truth and draw a training sample.

    A proposal is positive iff its best IoU with a ground-truth box reaches
    `pos_iou`; it inherits that object's superclass and delta target.
    Positives are capped at `positive_fraction` of the sample; the remainder
    fills with negatives. At most `n_sample` RoIs come back, seeded.
    """
    if len(proposal_boxes) == 0:
        raise ValidationError("sample_rois needs at least one proposal")
    if not 0 < pos_iou < 1:
        raise ValidationError("pos_iou must lie in (0, 1)")
    if n_sample < 1:
        raise ValidationError("n_sample must be >= 1")
    overlaps = iou_matrix(proposal_boxes, gt_boxes)  # (P, G)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(proposal_boxes)), best_gt]
    pos_idx = np.flatnonzero(best_iou >= pos_iou)
    neg_idx = np.flatnonzero(best_iou < pos_iou)

    max_pos = max(1, int(round(n_sample * positive_fraction)))
    if len(pos_idx) > max_pos:
        pos_idx = rng.choice(pos_idx, size=max_pos, replace=False)
        pos_idx.sort()
    n_neg = min(len(neg_idx), n_sample - len(pos_idx))
    if len(neg_idx) > n_neg:
        neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)
        neg_idx.sort()
    keep = np.concatenate([pos_idx, neg_idx]).astype(np.int64)

    boxes = proposal_boxes[keep]
    labels = np.full(len(keep), BACKGROUND, dtype=np.int64)
    matched = np.full(len(keep), -1, dtype=np.int64)
    targets = np.zeros((len(keep), 4), dtype=np.float64)
    n_pos = len(pos_idx)
    if n_pos:
        gt_for_pos = best_gt[pos_idx]
        labels[:n_pos] = gt_labels[gt_for_pos]
        matched[:n_pos] = gt_for_pos
        targets[:n_pos] = encode_deltas(boxes[:n_pos], gt_boxes[gt_for_pos])
    return LabeledRoIs(boxes, labels, matched, targets)


# ---------------------------------------------------------------------------
# detection head
# ---------------------------------------------------------------------------

@dataclass
class DetectionOutput:
    class_logits: ad.Tensor   # (n, K+1); background is the last column
    box_deltas: ad.Tensor     # (n, (K+1)*4)
    n_superclasses: int

    def class_scores(self) -> np.ndarray:
        return ad.softmax(ad.Tensor(self.class_logits.data)).data


def init_detection_head(widths: ModelWidths, c_in: int, n_superclasses: int,
                        rng: np.random.Generator, dtype=np.float32) -> dict[str, ad.Tensor]:
    flat = widths.pooled_size * widths.pooled_size * c_in
    f1, f2 = widths.det_fc
    k1 = n_superclasses + 1
    tensors = {}
    tensors["det/fc1/w"], tensors["det/fc1/b"] = init_linear(rng, flat, f1, dtype)
    tensors["det/fc2/w"], tensors["det/fc2/b"] = init_linear(rng, f1, f2, dtype)
    tensors["det/cls/w"], tensors["det/cls/b"] = init_linear(rng, f2, k1, dtype)
    tensors["det/box/w"], tensors["det/box/b"] = init_linear(rng, f2, 4 * k1, dtype)
    return tensors


def detection_head(pooled: ad.Tensor, tensors: dict[str, ad.Tensor], n_superclasses: int) -> DetectionOutput:
    """Pooled RoI features (n, P, P, C) -> class logits and per-class deltas."""
    if pooled.ndim != 4:
        raise ValidationError(f"detection_head expects (n, P, P, C), got {pooled.shape}")
    n = pooled.shape[0]
    flat = ad.reshape(pooled, (n, -1))
    if flat.shape[1] != tensors["det/fc1/w"].shape[0]:
        raise ValidationError(
            f"pooled feature dim {flat.shape[1]} does not match head input {tensors['det/fc1/w'].shape[0]}")
    h = ad.relu(flat @ tensors["det/fc1/w"] + tensors["det/fc1/b"])
    h = ad.relu(h @ tensors["det/fc2/w"] + tensors["det/fc2/b"])
    return DetectionOutput(
        class_logits=h @ tensors["det/cls/w"] + tensors["det/cls/b"],
        box_deltas=h @ tensors["det/box/w"] + tensors["det/box/b"],
        n_superclasses=n_superclasses,
    )


def loss_detection(output: DetectionOutput, rois: LabeledRoIs) -> tuple[ad.Tensor, ad.Tensor]:
    """(L_loc, L_superclass): smooth-L1 on positives' matched-class deltas and
    mean cross-entropy over positive RoIs only.

    With no positives both terms are zero; callers flag that in diagnostics.
    """
    if output.class_logits.shape[0] != len(rois):
        raise ValidationError("detection output not aligned with labeled RoIs")
    pos = np.flatnonzero(rois.positive_mask)
    dtype = output.class_logits.dtype
    if len(pos) == 0:
        zero = ad.Tensor(np.zeros((), dtype=dtype))
        return zero, zero
    ce = ad.cross_entropy_logits(ad.take(output.class_logits, pos), rois.labels[pos])
    l_superclass = ce.mean()
    k1 = output.n_superclasses + 1
    deltas = ad.reshape(output.box_deltas, (output.box_deltas.shape[0], k1, 4))
    picked = ad.take(deltas, pos, rois.labels[pos])  # (n_pos, 4)
    residual = picked - ad.Tensor(rois.regression_targets[pos].astype(dtype))
    l_loc = ad.smooth_l1(residual).mean()
    return l_loc, l_superclass


# ---------------------------------------------------------------------------
# proposal-head loss
# ---------------------------------------------------------------------------

def label_anchors(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    image_size: tuple[int, int],
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor labels: 1 positive, 0 negative, -1 ignored (the IoU dead band).

    Positive anchors reach `pos_iou` against some ground-truth box or are the
    best anchor for one; negatives stay below `neg_iou`. Every anchor is
    labeled, including those sticking past the image border: an untrained
    border anchor would keep whatever objectness its initialization gave it
    and pollute inference on small canvases (decode-time clipping handles the
    geometry).
    """
    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(anchors)), best_gt]
    labels = np.full(len(anchors), -1, dtype=np.int64)
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # best anchor per ground-truth object is positive even below the threshold
    per_gt_best = overlaps.max(axis=0)
    for g in range(gt_boxes.shape[0]):
        winners = np.flatnonzero(np.abs(overlaps[:, g] - per_gt_best[g]) < 1e-9)
        labels[winners] = 1
        best_gt[winners] = g
    targets = encode_deltas(anchors, gt_boxes[best_gt])
    return labels, targets


def loss_rpn(
    rpn_out: RpnOutput,
    gt_boxes: np.ndarray,
    image_size: tuple[int, int],
    rng: np.random.Generator,
    n_samples: int = 64,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> tuple[ad.Tensor, ad.Tensor]:
    """(objectness loss, box loss) over a seeded half-positive anchor sample."""
    labels, targets = label_anchors(rpn_out.anchors, gt_boxes, image_size, pos_iou, neg_iou)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    n_pos = min(len(pos_idx), n_samples // 2)
    if len(pos_idx) > n_pos:
        pos_idx = np.sort(rng.choice(pos_idx, size=n_pos, replace=False))
    n_neg = min(len(neg_idx), n_samples - len(pos_idx))
    if len(neg_idx) > n_neg:
        neg_idx = np.sort(rng.choice(neg_idx, size=n_neg, replace=False))
    dtype = rpn_out.objectness_logits.dtype
    zero = ad.Tensor(np.zeros((), dtype=dtype))

    obj_terms = []
    if len(pos_idx):
        obj_terms.append(ad.softplus(-ad.take(rpn_out.objectness_logits, pos_idx)).sum())
    if len(neg_idx):
        obj_terms.append(ad.softplus(ad.take(rpn_out.objectness_logits, neg_idx)).sum())
    denom = max(1, len(pos_idx) + len(neg_idx))
    obj_loss = (obj_terms[0] + obj_terms[1] if len(obj_terms) == 2 else
                obj_terms[0] if obj_terms else zero) * (1.0 / denom)

    if len(pos_idx):
        residual = ad.take(rpn_out.deltas, pos_idx) - ad.Tensor(targets[pos_idx].astype(dtype))
        box_loss = ad.smooth_l1(residual).mean()
    else:
        box_loss = zero
    return obj_loss, box_loss
