"""Diagnostics for the gap between anchor quality in training and box quality
at inference: IoU before/after regression, and score / output-IoU statistics
binned by IoU.  Outputs are CSV tables and self-contained SVG plots."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from html import escape

import numpy as np

from .anchors import AnchorSet
from .geometry import MAX_LOG_SCALE, as_boxes, decode_array, encode_array, iou_array
from .inference import InferenceConfig, decode_detections, decoded_boxes

BIN_WIDTH = 0.05
# decode/encode round trips land within a few ulp of the target box; rounding
# reported IoUs keeps an exact fit at exactly 1.0
IOU_DECIMALS = 10


def _round_iou(values):
    return np.round(np.asarray(values, dtype=np.float64), IOU_DECIMALS)


@dataclass
class BinStats:
    """Per-bin count/mean/std of a quantity binned by IoU; empty bins hold NaN."""

    edges: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def to_csv(self, path, value_name: str = "value"):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["bin_lo", "bin_hi", "count", f"{value_name}_mean", f"{value_name}_std"])
            for lo, hi, n, m, s in zip(self.edges[:-1], self.edges[1:], self.count, self.mean, self.std):
                out.writerow([f"{lo:.2f}", f"{hi:.2f}", int(n), "" if n == 0 else repr(float(m)),
                              "" if n == 0 else repr(float(s))])


def bin_stats(keys, values, width: float = BIN_WIDTH) -> BinStats:
    """Bin ``values`` by ``keys`` in [0, 1]; key 1.0 lands in the top bin."""
    nbins = int(round(1.0 / width))
    edges = np.linspace(0.0, 1.0, nbins + 1)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    idx = np.clip(np.searchsorted(edges, keys, side="right") - 1, 0, nbins - 1)
    count = np.zeros(nbins, dtype=np.int64)
    mean = np.full(nbins, np.nan)
    std = np.full(nbins, np.nan)
    for b in range(nbins):
        v = values[idx == b]
        count[b] = len(v)
        if len(v):
            mean[b] = v.mean()
            std[b] = v.std()
    return BinStats(edges, count, mean, std)


def _outputs_for(model, image):
    return model(np.asarray(image, dtype=np.float64))


def _gt_boxes(gts) -> np.ndarray:
    return as_boxes([g[0] for g in gts]) if gts else np.zeros((0, 4))


def oracle_offsets(anchor_set: AnchorSet, gts) -> np.ndarray:
    """Offsets that move every anchor exactly onto its argmax-IoU gt."""
    boxes = _gt_boxes(gts)
    out = np.zeros((len(anchor_set), 4))
    if len(boxes) == 0:
        return out
    ious = iou_array(anchor_set.boxes, boxes)
    has = ious.max(axis=1) > 0
    out[has] = encode_array(anchor_set.boxes[has], boxes[ious.argmax(axis=1)[has]])
    return out


def shift_from_offsets(anchors: np.ndarray, offsets: np.ndarray, gts) -> list[tuple[float, float]]:
    """(IoU before, IoU after) for anchors overlapping some gt.  Both sides use
    the gt nearest (argmax IoU) to the box being measured."""
    boxes = _gt_boxes(gts)
    if len(boxes) == 0:
        return []
    before = iou_array(anchors, boxes).max(axis=1)
    keep = np.flatnonzero(before > 0)
    refined = decode_array(anchors[keep], np.asarray(offsets)[keep], MAX_LOG_SCALE)
    after = _round_iou(iou_array(refined, boxes).max(axis=1))
    return list(zip(_round_iou(before[keep]).tolist(), after.tolist()))


def iou_shift(model, scenes, anchor_set: AnchorSet) -> list[tuple[float, float]]:
    """IoU with the nearest gt for every anchor, before and after stage-1 regression."""
    pairs = []
    A = len(anchor_set)
    for scene in scenes:
        out = _outputs_for(model, scene.image)
        t0 = np.asarray(out.offsets_stage1.data)[:A]
        pairs.extend(shift_from_offsets(anchor_set.boxes, t0, scene.gts))
    return pairs


@dataclass
class ScoreRecord:
    image_id: int
    class_id: int
    score: float
    iou: float


def detection_records(model, scenes, anchor_set: AnchorSet, config: InferenceConfig) -> list[ScoreRecord]:
    """Score and best same-class gt IoU of every detection above the score
    threshold, before NMS."""
    records = []
    for scene in scenes:
        h, w = scene.image.shape[-2:]
        dets = decode_detections(_outputs_for(model, scene.image), anchor_set, config, w, h)
        for d in dets:
            same = [g for g in scene.gts if g[1] == d.class_id]
            best = float(_round_iou(iou_array([d.box], _gt_boxes(same)).max())) if same else 0.0
            records.append(ScoreRecord(scene.index, d.class_id, d.score, best))
    return records


def localization_pairs(model, scenes, anchor_set: AnchorSet, config: InferenceConfig):
    """(input IoU, output IoU) per anchor overlapping a gt, where output IoU is
    measured against the same gt after the configured regression steps."""
    pairs = []
    for scene in scenes:
        boxes = _gt_boxes(scene.gts)
        if len(boxes) == 0:
            continue
        out = _outputs_for(model, scene.image)
        use_second = config.apply_second_regression and out.offsets_stage2 is not None
        regressed = decoded_boxes(out, anchor_set, use_second)
        ious = iou_array(anchor_set.boxes, boxes)
        best = ious.argmax(axis=1)
        inp = ious[np.arange(len(best)), best]
        keep = np.flatnonzero(inp > 0)
        outp = np.array([iou_array(regressed[i : i + 1], boxes[best[i] : best[i] + 1])[0, 0] for i in keep])
        pairs.extend(zip(_round_iou(inp[keep]).tolist(), _round_iou(outp).tolist()))
    return pairs


def score_vs_iou(model, scenes, anchor_set: AnchorSet, config: InferenceConfig):
    """(score statistics by output IoU, output-IoU statistics by input IoU)."""
    records = detection_records(model, scenes, anchor_set, config)
    loc = localization_pairs(model, scenes, anchor_set, config)
    return score_stats(records), bin_stats([p[0] for p in loc], [p[1] for p in loc])


def score_stats(records: list[ScoreRecord]) -> BinStats:
    return bin_stats([r.iou for r in records], [r.score for r in records])


def write_records_csv(path, records: list[ScoreRecord]):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_id", "class_id", "score", "iou"])
        for r in records:
            out.writerow([r.image_id, r.class_id, repr(r.score), repr(r.iou)])


def read_records_csv(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        return [
            ScoreRecord(int(r["image_id"]), int(r["class_id"]), float(r["score"]), float(r["iou"]))
            for r in csv.DictReader(fh)
        ]


def write_pairs_csv(path, pairs, names=("iou_before", "iou_after")):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(list(names))
        for a, b in pairs:
            out.writerow([repr(a), repr(b)])


def high_iou_std(stats: BinStats, min_iou: float = 0.7) -> float:
    """Count-weighted mean of per-bin std over bins starting at ``min_iou`` or above."""
    sel = (stats.edges[:-1] >= min_iou - 1e-12) & (stats.count > 0)
    if not np.any(sel):
        return float("nan")
    return float(np.average(stats.std[sel], weights=stats.count[sel]))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_W, _H, _PAD = 420, 320, 48


def _sx(v):
    return _PAD + v * (_W - 2 * _PAD)


def _sy(v):
    return _H - _PAD - v * (_H - 2 * _PAD)


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="13" font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{_sx(0)}" y1="{_sy(0)}" x2="{_sx(1)}" y2="{_sy(0)}" stroke="black"/>',
        f'<line x1="{_sx(0)}" y1="{_sy(0)}" x2="{_sx(0)}" y2="{_sy(1)}" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle" font-size="11" font-family="sans-serif">{escape(xlabel)}</text>',
        f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="11" font-family="sans-serif" '
        f'transform="rotate(-90 14 {_H / 2})">{escape(ylabel)}</text>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{_sx(t)}" y="{_sy(0) + 14}" text-anchor="middle" font-size="9">{t:g}</text>')
        parts.append(f'<text x="{_sx(0) - 6}" y="{_sy(t) + 3}" text-anchor="end" font-size="9">{t:g}</text>')
    return parts


def scatter_svg(pairs, title: str, xlabel: str, ylabel: str, max_points: int = 5000) -> str:
    parts = _frame(title, xlabel, ylabel)
    parts.append(f'<line x1="{_sx(0)}" y1="{_sy(0)}" x2="{_sx(1)}" y2="{_sy(1)}" stroke="#999" stroke-dasharray="4 3"/>')
    step = max(1, math.ceil(len(pairs) / max_points))
    for a, b in list(pairs)[::step]:
        parts.append(f'<circle cx="{_sx(a):.1f}" cy="{_sy(b):.1f}" r="1.2" fill="#1f77b4" fill-opacity="0.4"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def bins_svg(stats: BinStats, title: str, xlabel: str, ylabel: str, show: str = "mean") -> str:
    """Line plot of per-bin mean (with +-std band) or of per-bin std."""
    parts = _frame(title, xlabel, ylabel)
    ok = stats.count > 0
    xs = stats.centers[ok]
    ys = (stats.mean if show == "mean" else stats.std)[ok]
    if show == "mean":
        lo = np.clip(ys - stats.std[ok], 0, 1)
        hi = np.clip(ys + stats.std[ok], 0, 1)
        band = [f"{_sx(x):.1f},{_sy(v):.1f}" for x, v in zip(xs, hi)]
        band += [f"{_sx(x):.1f},{_sy(v):.1f}" for x, v in zip(xs[::-1], lo[::-1])]
        if band:
            parts.append(f'<polygon points="{" ".join(band)}" fill="#ff7f0e" fill-opacity="0.2"/>')
    line = " ".join(f"{_sx(x):.1f},{_sy(min(max(v, 0), 1)):.1f}" for x, v in zip(xs, ys))
    if line:
        parts.append(f'<polyline points="{line}" fill="none" stroke="#d62728" stroke-width="1.5"/>')
    for x, v in zip(xs, ys):
        parts.append(f'<circle cx="{_sx(x):.1f}" cy="{_sy(min(max(v, 0), 1)):.1f}" r="2" fill="#d62728"/>')
    parts.append("</svg>")
    return "\n".join(parts)
