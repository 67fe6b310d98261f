"""Axis-aligned box utilities shared by the detection head and the evaluator.

Boxes are (x_min, y_min, x_max, y_max) in float pixel coordinates, stored as
numpy arrays of shape (N, 4).  Everything here is pure numpy; the
differentiable pieces of the detection loss live in ``detect_head``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Regression deltas are divided by these stds before entering the loss, the
# usual Faster R-CNN normalization.
DELTA_STD = np.array([0.1, 0.1, 0.2, 0.2], dtype=np.float64)


@dataclass(frozen=True)
class Box:
    """One box in image coordinates, x_min < x_max and y_min < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_array().tolist()}")
        if min(self.x_min, self.y_min) < 0:
            raise ValueError(f"box has negative coordinates {self.as_array().tolist()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


def boxes_array(boxes) -> np.ndarray:
    """Stack Box objects / raw 4-vectors into an (N, 4) float64 array."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    rows = [b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64) for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack(rows)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = np.clip(boxes[:, 2] - boxes[:, 0], 0, None)
    h = np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    return w * h


def iou(a, b) -> float:
    """IoU of two single boxes; degenerate (zero-area) inputs give 0."""
    m = iou_matrix(boxes_array([a]), boxes_array([b]))
    return float(m[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes -> (N, M) in [0, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode_deltas(anchors: np.ndarray, targets: np.ndarray, stds: np.ndarray = DELTA_STD) -> np.ndarray:
    """Encode target boxes as (dx, dy, dw, dh) offsets from anchors.

    dx, dy are center offsets normalized by anchor size, dw, dh are log size
    ratios; the result is divided elementwise by ``stds``.  Raises on
    degenerate anchors.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("degenerate anchor in delta encoding")
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    deltas = np.stack(
        [(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )
    return deltas / stds


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray, stds: np.ndarray = DELTA_STD) -> np.ndarray:
    """Inverse of :func:`encode_deltas`: apply deltas to anchors -> boxes."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4) * stds
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, image_size) -> np.ndarray:
    """Clamp coordinates to the image; image_size is (h, w) or a square side."""
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
    return boxes


def score_order(scores: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Deterministic processing order: score descending, then box lexicographic."""
    keys = np.concatenate([-scores[:, None], boxes], axis=1)
    return np.lexsort(keys.T[::-1])


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy class-wise non-maximum suppression.

    A box is suppressed when its IoU with an already kept box of the same
    class exceeds ``iou_thr`` (strict).  Returns indices of kept boxes in
    descending score order; ties broken by box coordinates so the result is
    deterministic.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    classes = np.asarray(classes).reshape(-1)
    order = score_order(scores, boxes)
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    for i in order:
        ok = True
        for j in keep:
            if classes[i] == classes[j] and ious[i, j] > iou_thr:
                ok = False
                break
        if ok:
            keep.append(int(i))
    return np.array(keep, dtype=np.int64)
