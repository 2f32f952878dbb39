"""Anchor labelling and regression targets for original and refined anchors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MAX_LOG_SCALE, as_boxes, decode_array, encode_array, iou_array

IGNORE = -1
NEGATIVE = 0


@dataclass(frozen=True)
class MatchThresholds:
    mu_pos: float = 0.5
    mu_neg: float = 0.4

    def __post_init__(self):
        if not (0.0 < self.mu_pos <= 1.0):
            raise ValueError(f"mu_pos must lie in (0, 1], got {self.mu_pos}")
        if not (0.0 <= self.mu_neg <= self.mu_pos):
            raise ValueError(f"mu_neg must lie in [0, mu_pos], got {self.mu_neg}")


STAGE1_DEFAULT = MatchThresholds(0.5, 0.4)
STAGE2_DEFAULT = MatchThresholds(0.6, 0.5)
STAGE3_DEFAULT = MatchThresholds(0.7, 0.6)


@dataclass
class TargetAssignment:
    """Per-anchor labels for one stage.

    ``labels`` holds ``-1`` (ignore), ``0`` (negative) or the positive class id.
    ``gt_index`` is ``-1`` except on positives; ``reg_targets`` rows are zero
    except on positives, where they equal ``encode(anchor, matched gt)``.
    """

    labels: np.ndarray
    gt_index: np.ndarray
    reg_targets: np.ndarray
    max_iou: np.ndarray
    stage_id: int = 1

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.labels > 0))

    def one_hot(self, num_classes: int) -> np.ndarray:
        """``[A, M]`` binary classification targets (ignored rows are zero)."""
        out = np.zeros((len(self.labels), num_classes))
        pos = np.flatnonzero(self.labels > 0)
        out[pos, self.labels[pos] - 1] = 1.0
        return out

    @staticmethod
    def concat(parts: list["TargetAssignment"]) -> "TargetAssignment":
        return TargetAssignment(
            labels=np.concatenate([p.labels for p in parts]),
            gt_index=np.concatenate([p.gt_index for p in parts]),
            reg_targets=np.concatenate([p.reg_targets for p in parts]),
            max_iou=np.concatenate([p.max_iou for p in parts]),
            stage_id=parts[0].stage_id if parts else 1,
        )


def _split_gts(gts):
    if len(gts) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    boxes = as_boxes([g[0] for g in gts])
    classes = np.asarray([g[1] for g in gts], dtype=np.int64)
    return boxes, classes


def assign(anchors, gts, thresholds: MatchThresholds, stage_id: int = 1, num_classes: int | None = None) -> TargetAssignment:
    """Label ``anchors`` against ``gts`` (a list of ``(box, class_id)``).

    Anchors take the label of their argmax-IoU gt: positive at
    ``max_iou >= mu_pos``, negative below ``mu_neg``, ignored in between.
    Each gt additionally forces its highest-IoU anchor (lowest index on ties)
    to be positive, unless that anchor is already a threshold positive; an
    anchor forced by several gts takes the one it overlaps most.
    """
    anchors = as_boxes(anchors)
    gt_boxes, gt_classes = _split_gts(gts)
    if np.any(gt_classes < 1) or (num_classes is not None and np.any(gt_classes > num_classes)):
        raise ValueError(f"class ids must lie in [1, {num_classes or 'M'}], got {gt_classes.tolist()}")
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    reg_targets = np.zeros((n, 4))
    if len(gt_boxes) == 0 or n == 0:
        return TargetAssignment(labels, gt_index, reg_targets, np.zeros(n), stage_id)

    ious = iou_array(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best_gt]

    labels[(max_iou >= thresholds.mu_neg) & (max_iou < thresholds.mu_pos)] = IGNORE
    pos = max_iou >= thresholds.mu_pos
    gt_index[pos] = best_gt[pos]

    # forced matches: an anchor claimed by several gts goes to the one it overlaps most
    best_anchor = ious.argmax(axis=0)
    for i in np.unique(best_anchor):
        if pos[i]:
            continue
        claims = [j for j in np.flatnonzero(best_anchor == i) if ious[i, j] > 0]
        if claims:
            gt_index[i] = max(claims, key=lambda j: (ious[i, j], -j))

    matched = np.flatnonzero(gt_index >= 0)
    labels[matched] = gt_classes[gt_index[matched]]
    if len(matched):
        reg_targets[matched] = encode_array(anchors[matched], gt_boxes[gt_index[matched]])
    return TargetAssignment(labels, gt_index, reg_targets, max_iou, stage_id)


def refine_anchors(anchors, offsets) -> np.ndarray:
    """Apply stage-1 offsets to anchors.  Offsets are plain data: any autodiff
    tensor is read by value so no gradient flows into the targets."""
    offsets = getattr(offsets, "data", offsets)
    anchors = as_boxes(anchors)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim != 2 or offsets.shape != (len(anchors), 4):
        raise ValueError(f"need {len(anchors)} offset rows of 4, got shape {offsets.shape}")
    return decode_array(anchors, offsets, MAX_LOG_SCALE)
