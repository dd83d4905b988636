"""Box algebra walkthrough: IoU, anchors, delta coding, and NMS.

Run: python3 demos/01_box_geometry.py
"""

import numpy as np

from got.geometry import AnchorGrid, decode_deltas, encode_deltas, generate_anchors, iou, nms

print("== IoU ==")
a, b = (0, 0, 10, 10), (5, 0, 15, 10)
print(f"iou{a} vs {b} = {iou(a, b):.4f}  (overlap 50, union 150)")
print(f"identical boxes -> {iou(a, a):.1f}, disjoint -> {iou(a, (20, 20, 30, 30)):.1f}")

print("\n== Anchors ==")
grid = AnchorGrid(stride=16, scales=(64, 128, 256, 512), ratios=(0.5, 1.0, 2.0))
anchors = generate_anchors(grid, feat_h=2, feat_w=3)
print(f"{grid.anchors_per_cell} anchors per cell x 2x3 cells = {len(anchors)} anchors")
sq = generate_anchors(AnchorGrid(stride=16, scales=(128.0,), ratios=(1.0,)), 1, 1)[0]
print(f"ratio-1 scale-128 anchor is square: {sq[2] - sq[0]:.0f} x {sq[3] - sq[1]:.0f}")

print("\n== Delta coding ==")
anchor = (0, 0, 10, 10)
gt = (2, 3, 14, 19)
deltas = encode_deltas(anchor, gt)
print(f"encode({anchor} -> {gt}) = {np.round(deltas, 4)}")
print(f"decode round trip: {np.round(decode_deltas(anchor, deltas), 6)}")
double = encode_deltas((0, 0, 10, 10), (0, 0, 20, 20))
print(f"doubling both sides gives dw = dh = ln 2 = {double[2]:.6f}")

print("\n== NMS ==")
boxes = [(0, 0, 10, 12), (0, 4, 10, 12), (50, 50, 60, 60)]
scores = [0.9, 0.8, 0.7]
print(f"boxes: {boxes}")
print(f"pairwise iou(0,1) = {iou(boxes[0], boxes[1]):.3f} > 0.5, box 2 disjoint")
print(f"nms keep order at threshold 0.5: {nms(boxes, scores, 0.5)}")
print(f"threshold 1.0 keeps everything:  {nms(boxes, scores, 1.0)}")

rng = np.random.default_rng(0)
n = 200
rand_boxes = np.stack([
    rng.uniform(0, 80, n), rng.uniform(0, 80, n),
    np.zeros(n), np.zeros(n)], axis=1)
rand_boxes[:, 2] = rand_boxes[:, 0] + rng.uniform(5, 30, n)
rand_boxes[:, 3] = rand_boxes[:, 1] + rng.uniform(5, 30, n)
kept = nms(rand_boxes, rng.uniform(size=n), 0.3)
print(f"random field: {n} boxes -> {len(kept)} kept at threshold 0.3")
