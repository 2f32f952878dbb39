"""Dense multi-level anchor grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_array


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor layout: one ``(stride, base_size)`` pair per pyramid level."""

    levels: tuple[tuple[int, float], ...] = ((8, 16.0), (16, 32.0))
    scales: tuple[float, ...] = (1.0, 2 ** 0.5)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("at least one anchor level is required")
        strides = [s for s, _ in self.levels]
        if any(s <= 0 for s in strides) or any(b >= a for a, b in zip(strides[1:], strides)):
            raise ValueError(f"strides must be positive and strictly increasing, got {strides}")
        if any(b <= 0 for _, b in self.levels):
            raise ValueError("base sizes must be positive")
        if not self.scales or not self.aspect_ratios:
            raise ValueError("need at least one scale and one aspect ratio")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("scales and aspect ratios must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.levels)


@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray  # [A, 4]
    level_index: np.ndarray  # [A]
    image_w: int
    image_h: int
    level_shapes: tuple[tuple[int, int], ...] = field(default=())  # (rows, cols) per level

    def __len__(self) -> int:
        return len(self.boxes)


def expected_count(config: AnchorConfig, image_w: int, image_h: int) -> int:
    return sum(
        math.ceil(image_w / s) * math.ceil(image_h / s) * config.anchors_per_cell for s in config.strides
    )


def cell_templates(base_size: float, scales, ratios) -> np.ndarray:
    """Zero-centered ``[len(scales)*len(ratios), 4]`` anchor shapes, scale-major."""
    out = []
    for scale in scales:
        area = (base_size * scale) ** 2
        for ratio in ratios:
            w = math.sqrt(area / ratio)
            h = w * ratio
            out.append((-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h))
    return np.asarray(out, dtype=np.float64)


def generate_anchors(config: AnchorConfig, image_w: int, image_h: int) -> AnchorSet:
    """Anchors ordered level-major, then row-major cells, then scale, then ratio."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    boxes, levels, shapes = [], [], []
    for li, (stride, base) in enumerate(config.levels):
        cols, rows = math.ceil(image_w / stride), math.ceil(image_h / stride)
        cx = (np.arange(cols) + 0.5) * stride
        cy = (np.arange(rows) + 0.5) * stride
        yy, xx = np.meshgrid(cy, cx, indexing="ij")
        centers = np.stack([xx.ravel(), yy.ravel(), xx.ravel(), yy.ravel()], axis=1)
        tmpl = cell_templates(base, config.scales, config.aspect_ratios)
        level_boxes = (centers[:, None, :] + tmpl[None, :, :]).reshape(-1, 4)
        boxes.append(level_boxes)
        levels.append(np.full(len(level_boxes), li, dtype=np.int64))
        shapes.append((rows, cols))
    return AnchorSet(
        boxes=np.concatenate(boxes),
        level_index=np.concatenate(levels),
        image_w=image_w,
        image_h=image_h,
        level_shapes=tuple(shapes),
    )


def iou_matrix(anchors, gts) -> np.ndarray:
    """``[num_anchors, num_gt]`` IoU matrix; zero columns when there are no gts."""
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else anchors
    return iou_array(boxes, np.asarray(gts, dtype=np.float64).reshape(-1, 4))
