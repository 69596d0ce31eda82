"""Head decoding, IoU, score filtering and non-maximum suppression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .netdef import YoloLayer


def sigmoid(x):
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class Box:
    """Centre/size box normalized to the network input (0..1 on each axis)."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self, width=1.0, height=1.0):
        """(x_min, y_min, x_max, y_max) scaled by ``width`` and ``height``."""
        return ((self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height)

    @classmethod
    def from_corners(cls, x_min, y_min, x_max, y_max, width=1.0, height=1.0):
        if x_max < x_min or y_max < y_min:
            raise ValueError(f"corner box has max < min: {(x_min, y_min, x_max, y_max)}")
        return cls((x_min + x_max) / 2 / width, (y_min + y_max) / 2 / height,
                   (x_max - x_min) / width, (y_max - y_min) / height)

    @property
    def area(self):
        return self.w * self.h


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    # areas from the same corners as the intersection, so identical boxes give exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of (N, 4) and (M, 4) arrays of (cx, cy, w, h) rows."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax0, ax1 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay0, ay1 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None])
    ih = np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = ((ax1 - ax0) * (ay1 - ay0))[:, None] + ((bx1 - bx0) * (by1 - by0))[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass(frozen=True)
class Detection:
    box: Box
    objectness: float
    class_probs: tuple
    class_id: int
    score: float


def decode_arrays(head, layer: YoloLayer, input_size):
    """Vectorized decode of one image's head.

    Returns ``(boxes, objectness, class_probs)`` with ``boxes`` as (N, 4)
    rows of (cx, cy, w, h) and N = slots * rows * cols, slot-major.
    """
    head = np.asarray(head)
    if head.ndim == 4:
        if head.shape[0] != 1:
            raise ShapeError(f"decode expects a single image, got batch of {head.shape[0]}")
        head = head[0]
    if isinstance(input_size, (int, np.integer)):
        in_w = in_h = int(input_size)
    else:
        in_w, in_h = input_size
    n_slots = len(layer.mask)
    depth = 5 + layer.classes
    if head.shape[0] != depth * n_slots:
        raise ShapeError(f"head has {head.shape[0]} channels, expected (5+{layer.classes})*{n_slots}")
    rows, cols = head.shape[1:]
    t = head.reshape(n_slots, depth, rows, cols)
    anchors = np.array(layer.slot_anchors, dtype=head.dtype)
    jj = np.arange(cols, dtype=head.dtype)[None, None, :]
    ii = np.arange(rows, dtype=head.dtype)[None, :, None]
    bx = (sigmoid(t[:, 0]) + jj) / cols
    by = (sigmoid(t[:, 1]) + ii) / rows
    with np.errstate(over="ignore"):
        bw = anchors[:, 0, None, None] * np.exp(t[:, 2]) / in_w
        bh = anchors[:, 1, None, None] * np.exp(t[:, 3]) / in_h
    obj = sigmoid(t[:, 4])
    probs = sigmoid(t[:, 5:])  # (slots, classes, rows, cols)
    boxes = np.stack([bx, by, bw, bh], axis=-1).reshape(-1, 4)
    probs = probs.transpose(0, 2, 3, 1).reshape(-1, layer.classes)
    return boxes, obj.reshape(-1), probs


def _make_detections(boxes, obj, probs, keep=None):
    cls = np.argmax(probs, axis=1)
    score = obj * probs[np.arange(len(cls)), cls]
    idx = range(len(cls)) if keep is None else keep(score)
    return [
        Detection(Box(*map(float, boxes[k])), float(obj[k]), tuple(map(float, probs[k])),
                  int(cls[k]), float(score[k]))
        for k in idx
    ]


def decode_head(head, layer: YoloLayer, input_size) -> list:
    """One :class:`Detection` per (slot, cell) of a single-image head tensor.

    Box transform: ``cx = (sig(tx) + col) / S``, ``cy = (sig(ty) + row) / S``,
    ``w = anchor_w * exp(tw) / input_w``, ``h = anchor_h * exp(th) / input_h``.
    """
    return _make_detections(*decode_arrays(head, layer, input_size))


def filter_by_score(dets, score_thresh: float) -> list:
    """Keep detections with ``score >= score_thresh``, preserving order."""
    return [d for d in dets if d.score >= score_thresh]


def _priority(dets):
    return sorted(range(len(dets)), key=lambda k: (-dets[k].score, dets[k].class_id, k))


def nms(dets, iou_thresh: float, class_agnostic=False) -> list:
    """Greedy suppression; output sorted by score, ties by class then input order.

    A detection is dropped when a kept detection of the same class (any class
    if ``class_agnostic``) overlaps it with IoU >= ``iou_thresh``.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in [0, 1], got {iou_thresh}")
    if not dets:
        return []
    order = _priority(dets)
    boxes = np.array([[d.box.cx, d.box.cy, d.box.w, d.box.h] for d in dets])
    cls = np.array([d.class_id for d in dets])
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    kept = []
    for k in order:
        if not alive[k]:
            continue
        kept.append(dets[k])
        hit = overlaps[k] >= iou_thresh
        if not class_agnostic:
            hit &= cls == cls[k]
        alive &= ~hit
    return kept


def detect(heads, input_size, score_thresh=0.7, iou_thresh=0.5, class_agnostic=False):
    """decode -> score filter -> NMS for every image in a batch of heads.

    Returns a list (one per image) of detection lists.
    """
    if not heads:
        return []
    n = heads[0].output.shape[0]
    results = []
    for b in range(n):
        dets = []
        for head in heads:
            arrays = decode_arrays(head.output[b], head.layer, input_size)
            dets.extend(_make_detections(
                *arrays, keep=lambda s: np.flatnonzero(s >= score_thresh)))
        results.append(nms(dets, iou_thresh, class_agnostic))
    return results
