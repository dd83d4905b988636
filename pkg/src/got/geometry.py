"""Deterministic box algebra: IoU, anchors, delta coding, NMS, RoIAlign.

Boxes are half-open continuous rectangles [x1, x2) x [y1, y2) in pixel
coordinates; no "+1" conventions anywhere. Feature-map values are treated as
point samples at half-integer coordinates (value [r, c] lives at
(c + 0.5, r + 0.5)), which makes RoIAlign reduce to exact average pooling
when sample points land on those centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

Array = np.ndarray


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle; degenerate boxes are rejected at construction."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    def as_array(self) -> Array:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


def _boxes_array(boxes) -> Array:
    """Accept a Box, a sequence of 4 numbers, or an (n, 4) array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValidationError(f"expected boxes of shape (n, 4), got {arr.shape}")
    return arr


def iou(a, b) -> float:
    """Intersection-over-union of two boxes; symmetric, in [0, 1]."""
    return float(iou_matrix(_boxes_array(a), _boxes_array(b))[0, 0])


def iou_matrix(a: Array, b: Array) -> Array:
    """Pairwise IoU between (n, 4) and (m, 4) box arrays -> (n, m)."""
    a = _boxes_array(a)
    b = _boxes_array(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor layout: `len(scales) * len(ratios)` boxes per feature cell.

    `stride` is pixels per feature cell; `scales` are absolute side lengths at
    aspect ratio 1; `ratios` are height/width aspect values. Anchor centers sit
    at cell centers.
    """

    stride: float
    scales: tuple[float, ...] = (64.0, 128.0, 256.0, 512.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if self.stride <= 0 or any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ValidationError("anchor stride, scales and ratios must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def cell_anchors(self) -> Array:
        """(scales*ratios, 4) anchor offsets around a cell center at origin."""
        out = []
        for s in self.scales:  # scale-major ordering within a cell
            for r in self.ratios:
                h = s * np.sqrt(r)
                w = s / np.sqrt(r)
                out.append([-w / 2, -h / 2, w / 2, h / 2])
        return np.asarray(out, dtype=np.float64)


def generate_anchors(grid: AnchorGrid, feat_h: int, feat_w: int) -> Array:
    """All anchors for a feature map, (feat_h * feat_w * A, 4).

    Order: row-major over cells, scale-major within each cell. Anchors may
    extend beyond image borders; clipping happens later.
    """
    if feat_h < 1 or feat_w < 1:
        raise ValidationError("feature map must be at least 1x1")
    base = grid.cell_anchors()  # (A, 4)
    cx = (np.arange(feat_w) + 0.5) * grid.stride
    cy = (np.arange(feat_h) + 0.5) * grid.stride
    shift_x, shift_y = np.meshgrid(cx, cy)
    shifts = np.stack([shift_x, shift_y, shift_x, shift_y], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None, :, :]).reshape(-1, 4)


def encode_deltas(anchors, gt_boxes) -> Array:
    """Box -> (dx, dy, dw, dh) relative to anchors: offsets normalized by
    anchor size, sizes as log ratios."""
    a = _boxes_array(anchors)
    g = _boxes_array(gt_boxes)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + aw / 2, a[:, 1] + ah / 2
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    gcx, gcy = g[:, 0] + gw / 2, g[:, 1] + gh / 2
    deltas = np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )
    return deltas[0] if isinstance(anchors, Box) or np.asarray(anchors).ndim == 1 else deltas


def decode_deltas(anchors, deltas, image_size: tuple[int, int] | None = None) -> Array:
    """Inverse of :func:`encode_deltas`; optionally clips to (width, height)."""
    a = _boxes_array(anchors)
    d = np.asarray(deltas, dtype=np.float64)
    single = d.ndim == 1
    if single:
        d = d[None, :]
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + aw / 2, a[:, 1] + ah / 2
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    with np.errstate(over="ignore"):  # runaway deltas clip to the image later
        w = aw * np.exp(d[:, 2])
        h = ah * np.exp(d[:, 3])
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if image_size is not None:
        width, height = image_size
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return boxes[0] if single else boxes


def clip_boxes(boxes: Array, image_size: tuple[int, int]) -> Array:
    width, height = image_size
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, height)
    return out


def nms(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (ties: lower input index
    first); a box is dropped iff its IoU with an already-kept box exceeds
    `iou_threshold`. Returns kept input indices in visit order; `max_keep`
    stops early once that many boxes were kept (identical to truncating the
    full result).
    """
    b = _boxes_array(boxes) if len(boxes) else np.zeros((0, 4))
    s = np.asarray(scores, dtype=np.float64)
    if len(b) != len(s):
        raise ValidationError(f"nms got {len(b)} boxes but {len(s)} scores")
    if len(b) == 0:
        return []
    order = np.lexsort((np.arange(len(s)), -s))
    x1, y1, x2, y2 = (b[order, k] for k in range(4))
    areas = (x2 - x1) * (y2 - y1)
    alive = np.ones(len(order), dtype=bool)
    kept: list[int] = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(int(order[i]))
        if max_keep is not None and len(kept) >= max_keep:
            break
        rest = slice(i + 1, None)
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        overlap = np.where(union > 0, inter / union, 0.0)
        alive[rest] &= overlap <= iou_threshold
    return kept


def roi_align(
    feature_map,
    roi,
    spatial_scale: float,
    pooled: int = 7,
    samples_per_bin: int = 2,
) -> ad.Tensor:
    """Pool one RoI (image coordinates) to a (pooled, pooled, C) feature.

    The RoI maps to feature coordinates without rounding; every output bin
    averages `samples_per_bin**2` bilinear samples at fixed sub-bin points.
    Differentiable with respect to `feature_map` when it is a Tensor that
    requires gradients.
    """
    box = roi if isinstance(roi, Box) else Box(*np.asarray(roi, dtype=np.float64))
    out = roi_align_batch(feature_map, box.as_array()[None, :], spatial_scale, pooled, samples_per_bin)
    return ad.reshape(out, (pooled, pooled, out.shape[-1]))


def roi_align_batch(
    feature_map,
    rois: Array,
    spatial_scale: float,
    pooled: int = 7,
    samples_per_bin: int = 2,
) -> ad.Tensor:
    """Vectorized RoIAlign over (n, 4) RoIs -> Tensor (n, P, P, C)."""
    if spatial_scale <= 0:
        raise ValidationError("spatial_scale must be positive")
    fm = feature_map if isinstance(feature_map, ad.Tensor) else ad.Tensor(feature_map)
    if fm.ndim != 3:
        raise ValidationError(f"feature map must be HxWxC, got shape {fm.shape}")
    fh, fw, c = fm.shape
    r = _boxes_array(rois) * spatial_scale
    if np.any(r[:, 2] <= 0) or np.any(r[:, 0] >= fw) or np.any(r[:, 3] <= 0) or np.any(r[:, 1] >= fh):
        raise ValidationError("RoI lies entirely outside the feature map")
    n = len(r)
    p, s = pooled, samples_per_bin
    bin_w = (r[:, 2] - r[:, 0]) / p  # (n,)
    bin_h = (r[:, 3] - r[:, 1]) / p
    # sample centers: bin start + (k + 0.5)/s of the bin extent
    sub = (np.arange(s) + 0.5) / s
    gy = r[:, 1, None, None] + (np.arange(p)[None, :, None] + sub[None, None, :]) * bin_h[:, None, None]
    gx = r[:, 0, None, None] + (np.arange(p)[None, :, None] + sub[None, None, :]) * bin_w[:, None, None]
    # continuous -> pixel-center space; replicate values beyond the border
    py = np.clip(gy - 0.5, 0.0, fh - 1.0)  # (n, p, s)
    px = np.clip(gx - 0.5, 0.0, fw - 1.0)
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.minimum(y0, fh - 2) if fh > 1 else np.zeros_like(y0)
    x0 = np.minimum(x0, fw - 2) if fw > 1 else np.zeros_like(x0)
    wy = py - y0
    wx = px - x0
    y1 = np.minimum(y0 + 1, fh - 1)
    x1 = np.minimum(x0 + 1, fw - 1)

    # broadcast y-samples against x-samples: (n, p, s) x (n, p, s) -> (n, p, p, s, s)
    def grid(yv, xv):
        return (
            np.broadcast_to(yv[:, :, None, :, None], (n, p, p, s, s)),
            np.broadcast_to(xv[:, None, :, None, :], (n, p, p, s, s)),
        )

    y0g, x0g = grid(y0, x0)
    y1g, x1g = grid(y1, x1)
    wyg, wxg = grid(wy, wx)
    w00 = (1 - wyg) * (1 - wxg)
    w01 = (1 - wyg) * wxg
    w10 = wyg * (1 - wxg)
    w11 = wyg * wxg

    corners = ((y0g, x0g, w00), (y0g, x1g, w01), (y1g, x0g, w10), (y1g, x1g, w11))
    data = fm.data
    acc = np.zeros((n, p, p, s, s, c), dtype=data.dtype)
    for yg, xg, wg in corners:
        acc += data[yg, xg] * wg[..., None]
    out_data = acc.mean(axis=(3, 4))

    if not fm.requires_grad:
        return ad.Tensor(out_data)

    def backward(g: Array) -> None:
        gs = (g[:, :, :, None, None, :] / (s * s)).astype(data.dtype)
        flat = np.concatenate([(yg * fw + xg).reshape(-1) for yg, xg, _ in corners])
        vals = np.concatenate([(gs * wg[..., None]).reshape(-1, c) for _, _, wg in corners])
        fm._accumulate(_scatter_rows(flat, vals, fh * fw).reshape(fh, fw, c))

    return ad.Tensor(out_data, parents=(fm,), backward=backward)


def _scatter_rows(flat_index: Array, values: Array, n_rows: int) -> Array:
    """Sum `values` rows into an (n_rows, C) buffer at `flat_index` (bincount
    per channel: much faster than np.add.at)."""
    out = np.empty((n_rows, values.shape[1]), dtype=values.dtype)
    for ch in range(values.shape[1]):
        out[:, ch] = np.bincount(flat_index, weights=values[:, ch], minlength=n_rows)
    return out
