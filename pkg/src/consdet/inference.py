"""Turn detector outputs into scored, de-duplicated boxes."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet
from .geometry import MAX_LOG_SCALE, Box, clip_array, decode_array, iou_array
from .tensor import stable_sigmoid


@dataclass(frozen=True)
class InferenceConfig:
    apply_second_regression: bool = True
    score_threshold: float = 0.05
    pre_nms_topk: int = 1000
    nms_iou: float = 0.5
    max_detections: int = 100

    def __post_init__(self):
        if not (0.0 <= self.score_threshold <= 1.0) or not (0.0 <= self.nms_iou <= 1.0):
            raise ValueError("score_threshold and nms_iou must lie in [0, 1]")
        if self.pre_nms_topk <= 0 or self.max_detections <= 0:
            raise ValueError("pre_nms_topk and max_detections must be positive")


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    anchor_index: int = -1


def _rows(x, image_index: int, per_image: int) -> np.ndarray:
    data = getattr(x, "data", x)
    data = np.asarray(data, dtype=np.float64)
    return data[image_index * per_image : (image_index + 1) * per_image]


def decoded_boxes(outputs, anchors: AnchorSet, apply_second_regression: bool, image_index: int = 0) -> np.ndarray:
    """Unclipped boxes per anchor after one or two regression steps."""
    A = len(anchors)
    t0 = _rows(outputs.offsets_stage1, image_index, A)
    if t0.shape != (A, 4):
        raise ValueError(f"stage-1 offsets {t0.shape} do not match {A} anchors")
    boxes = decode_array(anchors.boxes, t0, MAX_LOG_SCALE)
    if apply_second_regression:
        if outputs.offsets_stage2 is None:
            raise ValueError("second regression requested but the model has no stage-2 head")
        t1 = _rows(outputs.offsets_stage2, image_index, A)
        boxes = decode_array(boxes, t1, MAX_LOG_SCALE)
    return boxes


def decode_detections(
    outputs,
    anchors: AnchorSet,
    config: InferenceConfig,
    image_w: float,
    image_h: float,
    image_index: int = 0,
) -> list[Detection]:
    """Score threshold, pre-NMS top-k, clip and drop degenerate boxes (no NMS)."""
    A = len(anchors)
    logits = _rows(outputs.cls_logits, image_index, A)
    if logits.ndim != 2 or logits.shape[0] != A:
        raise ValueError(f"class logits {logits.shape} do not match {A} anchors")
    M = logits.shape[1]
    boxes = decoded_boxes(outputs, anchors, config.apply_second_regression, image_index)
    scores = stable_sigmoid(logits).ravel()
    cand = np.flatnonzero(scores >= config.score_threshold)
    order = cand[np.argsort(-scores[cand], kind="stable")][: config.pre_nms_topk]
    anchor_idx, cls_idx = np.divmod(order, M)
    clipped = clip_array(boxes[anchor_idx], image_w, image_h)
    ok = (clipped[:, 2] > clipped[:, 0]) & (clipped[:, 3] > clipped[:, 1])
    return [
        Detection(Box(*map(float, clipped[k])), int(cls_idx[k]) + 1, float(scores[order[k]]), int(anchor_idx[k]))
        for k in np.flatnonzero(ok)
    ]


def nms(dets: list[Detection], iou_threshold: float, max_detections: int | None = None) -> list[Detection]:
    """Greedy per-class NMS; a box is suppressed when IoU with a kept box is
    strictly greater than ``iou_threshold``.  Output is sorted by score
    (ties by input position) and truncated to ``max_detections``."""
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError("iou_threshold must lie in [0, 1]")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        ious = iou_array(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for k in range(len(idx)):
            if not alive[k]:
                continue
            keep.append(idx[k])
            alive[k + 1 :] &= ~(ious[k, k + 1 :] > iou_threshold)
    keep = sorted(keep, key=lambda i: (-scores[i], i))
    if max_detections is not None:
        keep = keep[:max_detections]
    return [dets[i] for i in keep]


def postprocess(outputs, anchors: AnchorSet, config: InferenceConfig, image_w, image_h, image_index: int = 0):
    dets = decode_detections(outputs, anchors, config, image_w, image_h, image_index)
    return nms(dets, config.nms_iou, config.max_detections)


def detect(model, images, anchors: AnchorSet, config: InferenceConfig) -> list[list[Detection]]:
    """Frozen forward pass plus post-processing for a batch of images."""
    images = np.asarray(images, dtype=np.float64)
    outputs = model(images)
    h, w = images.shape[2], images.shape[3]
    return [postprocess(outputs, anchors, config, w, h, b) for b in range(images.shape[0])]


def write_detections_csv(path, per_image: dict[int, list[Detection]]):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_id", "class_id", "score", "x1", "y1", "x2", "y2"])
        for image_id in sorted(per_image):
            for d in per_image[image_id]:
                out.writerow([image_id, d.class_id, f"{d.score:.6f}", *(f"{v:.6f}" for v in d.box)])


def read_detections_csv(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = Detection(
                Box(float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"])),
                int(row["class_id"]),
                float(row["score"]),
            )
            out.setdefault(int(row["image_id"]), []).append(d)
    return out
