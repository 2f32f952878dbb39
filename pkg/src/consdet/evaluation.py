"""COCO-style average precision.

Per class and IoU threshold, detections from all images are ranked by score
(ties: image id, then input order) and greedily matched, image by image, to
the unmatched same-class ground truth with the highest IoU at or above the
threshold.  AP is the 101-point interpolated area under the precision
envelope; the headline AP averages thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import as_boxes, box_area, iou_array

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
TABLE_COLUMNS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class EvalResult:
    ap: float
    ap_at: dict[float, float]
    per_class_ap: dict[int, float]
    counts: dict[float, dict[str, int]]
    ap_by_size: dict[str, float] = field(default_factory=dict)

    def metrics(self) -> list[tuple[str, float]]:
        rows = [("AP", self.ap)]
        rows += [(f"AP{int(round(t * 100))}", v) for t, v in self.ap_at.items()]
        rows += [(f"AP_{k}", v) for k, v in self.ap_by_size.items()]
        rows += [(f"AP_class{c}", v) for c, v in self.per_class_ap.items()]
        for t, c in self.counts.items():
            tag = int(round(t * 100))
            rows += [(f"TP{tag}", c["tp"]), (f"FP{tag}", c["fp"]), (f"FN{tag}", c["fn"])]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["metric", "value"])
        for name, value in self.metrics():
            out.writerow([name, value if isinstance(value, int) else f"{value:.6f}"])
        return buf.getvalue()

    def table_row(self) -> list[float]:
        return [self.ap] + [self.ap_at[t] for t in TABLE_COLUMNS]


def format_table(rows: list[tuple[str, EvalResult]], label: str = "model") -> str:
    """Plain-text table with the AP, AP50 ... AP90 columns (values in percent)."""
    head = ["AP"] + [f"AP{int(t * 100)}" for t in TABLE_COLUMNS]
    width = max([len(label)] + [len(name) for name, _ in rows])
    lines = [f"{label:<{width}} | " + " ".join(f"{h:>6}" for h in head)]
    lines.append("-" * len(lines[0]))
    for name, res in rows:
        lines.append(f"{name:<{width}} | " + " ".join(f"{100 * v:6.1f}" for v in res.table_row()))
    return "\n".join(lines)


def _as_mapping(per_image) -> dict:
    if isinstance(per_image, dict):
        return per_image
    return dict(enumerate(per_image))


def _gt_arrays(gts):
    if not gts:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    return as_boxes([g[0] for g in gts]), np.asarray([g[1] for g in gts], dtype=np.int64)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP from score-ordered recall/precision points."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(np.asarray(precision, dtype=np.float64)[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(np.mean(q))


def match_class(dets, gts, class_id: int, iou_threshold: float, area_range=None):
    """Greedy matching for one class.

    Returns ``(tp, fp, num_gt, matches)`` where ``tp``/``fp`` are 0/1 arrays in
    ranking order (detections that hit area-ignored gts or fall outside
    ``area_range`` while unmatched are dropped), and ``matches`` lists
    ``(image_id, det_index, gt_index or -1)`` for every ranked detection.
    """
    dets, gts = _as_mapping(dets), _as_mapping(gts)
    ranked = []
    for image_id in sorted(dets):
        for k, d in enumerate(dets[image_id]):
            if d.class_id == class_id:
                ranked.append((-d.score, image_id, k))
    ranked.sort()

    gt_info = {}
    num_gt = 0
    for image_id in set(gts) | set(dets):
        boxes, classes = _gt_arrays(gts.get(image_id, []))
        sel = np.flatnonzero(classes == class_id)
        b = boxes[sel]
        if area_range is None:
            ignore = np.zeros(len(sel), dtype=bool)
        else:
            area = box_area(b)
            ignore = (area < area_range[0]) | (area >= area_range[1])
        num_gt += int(np.count_nonzero(~ignore))
        mine = [k for k, d in enumerate(dets.get(image_id, [])) if d.class_id == class_id]
        rows = {}
        if mine and len(sel):
            ious = iou_array([dets[image_id][k].box for k in mine], b)
            rows = dict(zip(mine, ious))
        gt_info[image_id] = (sel, ignore, np.zeros(len(sel), dtype=bool), rows)

    tp, fp, matches = [], [], []
    for _, image_id, k in ranked:
        d = dets[image_id][k]
        sel, ignore, used, rows = gt_info[image_id]
        best = -1
        if len(sel):
            ious = rows[k]
            for want_ignored in (False, True):
                cand = np.flatnonzero((~used) & (ignore == want_ignored) & (ious >= iou_threshold))
                if len(cand):
                    best = cand[np.argmax(ious[cand])]
                    break
        if best >= 0:
            used[best] = True
            matches.append((image_id, k, int(sel[best])))
            if ignore[best]:
                continue
            tp.append(1)
            fp.append(0)
        else:
            matches.append((image_id, k, -1))
            if area_range is not None:
                a = (d.box[2] - d.box[0]) * (d.box[3] - d.box[1])
                if a < area_range[0] or a >= area_range[1]:
                    continue
            tp.append(0)
            fp.append(1)
    return np.array(tp, dtype=np.int64), np.array(fp, dtype=np.int64), num_gt, matches


def _pr(tp, fp, num_gt):
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / num_gt if num_gt else np.zeros(len(ctp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def pr_curve(dets, gts, class_id: int, iou_threshold: float) -> list[tuple[float, float]]:
    """(recall, precision) after each ranked detection of ``class_id``."""
    tp, fp, num_gt, _ = match_class(dets, gts, class_id, iou_threshold)
    recall, precision = _pr(tp, fp, num_gt)
    return list(zip(recall.tolist(), precision.tolist()))


def default_size_ranges(image_side: int) -> dict[str, tuple[float, float]]:
    small = (0.25 * image_side) ** 2
    medium = (0.5 * image_side) ** 2
    return {"S": (0.0, small), "M": (small, medium), "L": (medium, float("inf"))}


def evaluate(dets, gts, num_classes: int | None = None, size_ranges: dict | None = None) -> EvalResult:
    """COCO-style AP over per-image detection and ground-truth lists.

    ``dets``/``gts`` are either lists indexed by image id or dicts keyed by it;
    gts are ``(box, class_id)`` pairs.  Classes without any ground truth do
    not enter the class average.
    """
    dets, gts = _as_mapping(dets), _as_mapping(gts)
    gt_classes = {int(c) for items in gts.values() for _, c in items}
    if num_classes is None:
        num_classes = max(gt_classes, default=0)
    for items in dets.values():
        for d in items:
            if not (1 <= d.class_id <= num_classes):
                raise ValueError(f"detection class {d.class_id} outside [1, {num_classes}]")
    classes = sorted(c for c in gt_classes if 1 <= c <= num_classes)

    def ap_for(t, c, area_range=None):
        tp, fp, num_gt, _ = match_class(dets, gts, c, t, area_range)
        if num_gt == 0:
            return None, tp, fp, num_gt
        recall, precision = _pr(tp, fp, num_gt)
        return interpolated_ap(recall, precision), tp, fp, num_gt

    ap_at, counts = {}, {}
    per_class = {c: [] for c in classes}
    for t in IOU_THRESHOLDS:
        aps = []
        n_tp = n_fp = n_gt = 0
        for c in classes:
            ap, tp, fp, num_gt = ap_for(t, c)
            aps.append(ap)
            per_class[c].append(ap)
            n_tp += int(tp.sum())
            n_fp += int(fp.sum())
            n_gt += num_gt
        ap_at[t] = float(np.mean(aps)) if aps else 0.0
        counts[t] = {"tp": n_tp, "fp": n_fp, "fn": n_gt - n_tp}

    by_size = {}
    if size_ranges:
        for name, rng in size_ranges.items():
            vals = []
            for t in IOU_THRESHOLDS:
                aps = [a for a in (ap_for(t, c, rng)[0] for c in classes) if a is not None]
                if aps:
                    vals.append(float(np.mean(aps)))
            by_size[name] = float(np.mean(vals)) if vals else float("nan")

    ap = float(np.mean([ap_at[t] for t in IOU_THRESHOLDS]))
    return EvalResult(
        ap=ap,
        ap_at=ap_at,
        per_class_ap={c: float(np.mean(v)) for c, v in per_class.items()},
        counts=counts,
        ap_by_size=by_size,
    )
