"""Axis-aligned box arithmetic.

Boxes use continuous corner coordinates ``(x1, y1, x2, y2)`` with
``w = x2 - x1`` (no ``+1``).  Scalar helpers work on :class:`Box` and
:class:`Offsets`; the ``*_array`` variants are the vectorized forms used by
the training and inference loops and operate on ``[N, 4]`` float arrays.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

# bound on |tw|, |th| for offsets predicted by a network; keeps exp() finite
# and the decoded box non-degenerate
MAX_LOG_SCALE = math.log(1000.0 / 16)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


class Offsets(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def _check_positive(box, what="box"):
    if not (box[2] - box[0] > 0 and box[3] - box[1] > 0):
        raise ValueError(f"{what} must have positive width and height, got {tuple(box)}")


def iou(a: Box, b: Box) -> float:
    _check_positive(a)
    _check_positive(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def encode(anchor: Box, target: Box) -> Offsets:
    """Regression offsets that move ``anchor`` onto ``target``."""
    _check_positive(anchor, "anchor")
    _check_positive(target, "target")
    wa, ha = anchor[2] - anchor[0], anchor[3] - anchor[1]
    wt, ht = target[2] - target[0], target[3] - target[1]
    cxa, cya = anchor[0] + 0.5 * wa, anchor[1] + 0.5 * ha
    cxt, cyt = target[0] + 0.5 * wt, target[1] + 0.5 * ht
    return Offsets((cxt - cxa) / wa, (cyt - cya) / ha, math.log(wt / wa), math.log(ht / ha))


def decode(anchor: Box, offsets: Offsets, max_log_scale: float | None = None) -> Box:
    """Inverse of :func:`encode`.

    ``max_log_scale`` clamps ``tw``/``th`` to ``[-m, m]`` before exponentiation;
    leave it ``None`` for exact inversion.
    """
    _check_positive(anchor, "anchor")
    if not all(math.isfinite(v) for v in offsets):
        raise ValueError(f"offsets must be finite, got {tuple(offsets)}")
    wa, ha = anchor[2] - anchor[0], anchor[3] - anchor[1]
    tw, th = offsets[2], offsets[3]
    if max_log_scale is not None:
        tw = min(max(tw, -max_log_scale), max_log_scale)
        th = min(max(th, -max_log_scale), max_log_scale)
    # corner form: zero offsets give back the anchor bit for bit
    dx, dy = offsets[0] * wa, offsets[1] * ha
    gw, gh = 0.5 * (wa - wa * math.exp(tw)), 0.5 * (ha - ha * math.exp(th))
    return Box(anchor[0] + dx + gw, anchor[1] + dy + gh, anchor[2] + dx - gw, anchor[3] + dy - gh)


def clip(b: Box, width: float, height: float) -> Box:
    return Box(
        min(max(b[0], 0.0), width),
        min(max(b[1], 0.0), height),
        min(max(b[2], 0.0), width),
        min(max(b[3], 0.0), height),
    )


# ---------------------------------------------------------------------------
# vectorized forms
# ---------------------------------------------------------------------------


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an [N, 4] box array, got shape {arr.shape}")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_array(a, b) -> np.ndarray:
    """Pairwise IoU, ``[len(a), len(b)]``.

    Uses the same operation order as :func:`iou`, so entries agree bitwise
    with the scalar form.
    """
    a, b = as_boxes(a), as_boxes(b)
    for arr in (a, b):
        if len(arr) and not np.all((arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1])):
            raise ValueError("all boxes must have positive width and height")
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(overlap, inter / np.where(overlap, union, 1.0), 0.0)


def encode_array(anchors, targets) -> np.ndarray:
    anchors, targets = as_boxes(anchors), as_boxes(targets)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    wt = targets[:, 2] - targets[:, 0]
    ht = targets[:, 3] - targets[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0) or np.any(wt <= 0) or np.any(ht <= 0):
        raise ValueError("encode needs positive-area anchors and targets")
    cxa, cya = anchors[:, 0] + 0.5 * wa, anchors[:, 1] + 0.5 * ha
    cxt, cyt = targets[:, 0] + 0.5 * wt, targets[:, 1] + 0.5 * ht
    return np.stack([(cxt - cxa) / wa, (cyt - cya) / ha, np.log(wt / wa), np.log(ht / ha)], axis=1)


def decode_array(anchors, offsets, max_log_scale: float | None = None) -> np.ndarray:
    anchors = as_boxes(anchors)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    if len(anchors) != len(offsets):
        raise ValueError(f"{len(anchors)} anchors but {len(offsets)} offsets")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    tw, th = offsets[:, 2], offsets[:, 3]
    if max_log_scale is not None:
        tw = np.clip(tw, -max_log_scale, max_log_scale)
        th = np.clip(th, -max_log_scale, max_log_scale)
    dx, dy = offsets[:, 0] * wa, offsets[:, 1] * ha
    gw, gh = 0.5 * (wa - wa * np.exp(tw)), 0.5 * (ha - ha * np.exp(th))
    return np.stack(
        [anchors[:, 0] + dx + gw, anchors[:, 1] + dy + gh, anchors[:, 2] + dx - gw, anchors[:, 3] + dy - gh],
        axis=1,
    )


def clip_array(boxes, width: float, height: float) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    np.clip(boxes[:, 0::2], 0.0, width, out=boxes[:, 0::2])
    np.clip(boxes[:, 1::2], 0.0, height, out=boxes[:, 1::2])
    return boxes
