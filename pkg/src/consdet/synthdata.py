"""Deterministic synthetic detection scenes with controllable occlusion.

Objects are filled shapes on a noisy grey background: class 1 rectangles,
class 2 ellipses, further classes rectangles in their own intensity band.
Later objects paint over earlier ones, while ground-truth boxes keep the
full (amodal) extent.  With probability ``occlusion_rate`` an image receives
a pair of objects whose boxes overlap with IoU in [0.2, 0.6].
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .geometry import Box, iou

SPLITS = {"train": 0, "val": 1, "test": 2}
PAIR_IOU = (0.2, 0.6)


@dataclass(frozen=True)
class SceneSpec:
    image_side: int = 64
    num_classes: int = 2
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 12.0
    max_size: float = 40.0
    occlusion_rate: float = 0.7
    seed: int = 0
    noise_std: float = 0.05

    def __post_init__(self):
        if self.image_side <= 0 or self.num_classes < 1:
            raise ValueError("image_side and num_classes must be positive")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not (0 < self.min_size <= self.max_size <= self.image_side):
            raise ValueError("need 0 < min_size <= max_size <= image_side")
        if not (0.0 <= self.occlusion_rate <= 1.0):
            raise ValueError("occlusion_rate must lie in [0, 1]")


@dataclass
class Scene:
    image: np.ndarray  # [1, 1, H, W]
    gts: list[tuple[Box, int]]
    index: int = 0


def class_intensity(class_id: int, num_classes: int) -> float:
    if num_classes == 1:
        return 0.9
    return 0.9 - 0.5 * (class_id - 1) / (num_classes - 1)


def _rng(spec: SceneSpec, index: int, split: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, SPLITS[split], index])))


def _random_box(rng, spec: SceneSpec) -> Box:
    w, h = rng.uniform(spec.min_size, spec.max_size, size=2)
    x1 = rng.uniform(0.0, spec.image_side - w)
    y1 = rng.uniform(0.0, spec.image_side - h)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def _overlapping_box(rng, spec: SceneSpec, other: Box, tries: int = 200) -> Box | None:
    s = spec.image_side
    for _ in range(tries):
        w, h = rng.uniform(spec.min_size, spec.max_size, size=2)
        # centre the search on the partner so a useful overlap is likely
        cx = rng.uniform(other.x1, other.x2)
        cy = rng.uniform(other.y1, other.y2)
        x1 = min(max(cx - w / 2, 0.0), s - w)
        y1 = min(max(cy - h / 2, 0.0), s - h)
        cand = Box(float(x1), float(y1), float(x1 + w), float(y1 + h))
        if PAIR_IOU[0] <= iou(cand, other) <= PAIR_IOU[1]:
            return cand
    return None


def _layout(rng, spec: SceneSpec) -> list[Box]:
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[Box] = []
    if spec.max_objects >= 2 and rng.random() < spec.occlusion_rate:
        n = max(n, 2)
        while True:
            first = _random_box(rng, spec)
            second = _overlapping_box(rng, spec, first)
            if second is not None:
                boxes = [first, second]
                break
    while len(boxes) < n:
        best, best_overlap = None, None
        for _ in range(50):
            cand = _random_box(rng, spec)
            overlap = max((iou(cand, b) for b in boxes), default=0.0)
            if best is None or overlap < best_overlap:
                best, best_overlap = cand, overlap
            if overlap == 0.0:
                break
        if best_overlap and len(boxes) >= spec.min_objects:
            break
        boxes.append(best)
    return boxes


def render(spec: SceneSpec, objects: list[tuple[Box, int]], rng) -> np.ndarray:
    s = spec.image_side
    img = np.full((s, s), 0.1) + rng.normal(0.0, spec.noise_std, size=(s, s))
    centers = np.arange(s) + 0.5
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    for box, cls in objects:
        level = class_intensity(cls, spec.num_classes) + rng.uniform(-0.05, 0.05)
        if cls == 2:
            mx, my = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
            rx, ry = box.width / 2, box.height / 2
            mask = ((xx - mx) / rx) ** 2 + ((yy - my) / ry) ** 2 <= 1.0
        else:
            mask = (xx >= box.x1) & (xx < box.x2) & (yy >= box.y1) & (yy < box.y2)
        img[mask] = level + rng.normal(0.0, spec.noise_std, size=int(mask.sum()))
    return img[None, None]


def generate(spec: SceneSpec, index: int, split: str = "train") -> Scene:
    """Scene ``index`` of ``split``; a pure function of its arguments."""
    rng = _rng(spec, index, split)
    boxes = _layout(rng, spec)
    classes = rng.integers(1, spec.num_classes + 1, size=len(boxes))
    objects = [(b, int(c)) for b, c in zip(boxes, classes)]
    return Scene(render(spec, objects, rng), objects, index)


def dataset(spec: SceneSpec, count: int, split: str = "train") -> Iterator[Scene]:
    for i in range(count):
        yield generate(spec, i, split)


def flip_horizontal(scene: Scene) -> Scene:
    w = scene.image.shape[-1]
    gts = [(Box(w - b.x2, b.y1, w - b.x1, b.y2), c) for b, c in scene.gts]
    return Scene(np.ascontiguousarray(scene.image[..., ::-1]), gts, scene.index)


# ---------------------------------------------------------------------------
# on-disk format: PGM (P5) images plus one annotation CSV per split
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray):
    img = np.asarray(image).reshape(image.shape[-2], image.shape[-1])
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
    return data.astype(np.float64) / maxval


def dump_split(spec: SceneSpec, count: int, split: str, out_dir) -> int:
    split_dir = os.path.join(out_dir, split)
    os.makedirs(os.path.join(split_dir, "images"), exist_ok=True)
    with open(os.path.join(split_dir, "annotations.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_id", "class_id", "x1", "y1", "x2", "y2"])
        for scene in dataset(spec, count, split):
            write_pgm(os.path.join(split_dir, "images", f"{scene.index:06d}.pgm"), scene.image)
            for box, cls in scene.gts:
                out.writerow([scene.index, cls, *(f"{v:.6f}" for v in box)])
    return count


def read_annotations(path) -> dict[int, list[tuple[Box, int]]]:
    out: dict[int, list[tuple[Box, int]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = Box(float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"]))
            out.setdefault(int(row["image_id"]), []).append((box, int(row["class_id"])))
    return out
