"""End-to-end training and evaluation loops over synthetic splits."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import generate_anchors
from .config import ExperimentConfig
from .detector import DetectorModel, baseline_training_step, training_step
from .evaluation import EvalResult, default_size_ranges, evaluate
from .inference import Detection, detect
from .synthdata import Scene, dataset, flip_horizontal

log = logging.getLogger(__name__)


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]

    def write_csv(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            out = csv.DictWriter(fh, fieldnames=list(self.rows[0]), lineterminator="\n")
            out.writeheader()
            for r in self.rows:
                out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def build_model(cfg: ExperimentConfig) -> DetectorModel:
    return DetectorModel(
        cfg.model, cfg.anchor_config, cfg.data.num_classes, cfg.loss.num_reg_stages, seed=cfg.trainer.seed
    )


def load_model(cfg: ExperimentConfig, path) -> DetectorModel:
    """Rebuild a model for ``cfg`` from a checkpoint; the stage-2 head is
    present iff the checkpoint has one."""
    state = T.load_checkpoint(path)
    num_reg = 2 if "reg2.weight" in state else 1
    model = DetectorModel(cfg.model, cfg.anchor_config, cfg.data.num_classes, num_reg, seed=cfg.trainer.seed)
    model.load_state_dict(state)
    return model


def load_split(cfg: ExperimentConfig, split: str, count: int | None = None) -> list[Scene]:
    n = cfg.splits.count(split) if count is None else count
    return list(dataset(cfg.data, n, split))


def train(
    cfg: ExperimentConfig,
    scenes: list[Scene] | None = None,
    reference_baseline: bool = False,
    progress=None,
) -> tuple[DetectorModel, TrainHistory]:
    """Train a model from ``cfg``; fully determined by the config seeds.

    ``reference_baseline`` swaps in the plain single-stage step (used to check
    that the consistent step degenerates to it when its extra terms are off).
    """
    tc = cfg.trainer
    scenes = load_split(cfg, "train") if scenes is None else scenes
    if not scenes:
        raise ValueError("no training scenes")
    model = build_model(cfg)
    anchor_set = generate_anchors(cfg.anchor_config, cfg.data.image_side, cfg.data.image_side)
    opt = T.SGD(model.parameters(), tc.lr, tc.momentum, tc.weight_decay)
    rng = T.make_rng(tc.seed + 7919)
    order: list[int] = []
    history = TrainHistory()
    for step in range(tc.steps):
        batch = []
        while len(batch) < tc.batch_size:
            if not order:
                order = list(rng.permutation(len(scenes)))
            scene = scenes[order.pop(0)]
            if tc.flip_augment and rng.random() < 0.5:
                scene = flip_horizontal(scene)
            batch.append(scene)
        images = np.concatenate([s.image for s in batch])
        gts = [s.gts for s in batch]
        lr = tc.lr_at(step)
        if reference_baseline:
            report = baseline_training_step(model, images, gts, anchor_set, cfg.loss, cfg.stage1, opt, lr)
        else:
            report = training_step(model, images, gts, anchor_set, cfg.loss, cfg.thresholds, opt, lr)
        if not np.isfinite(report.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        row = {"step": step, "lr": lr, "total": report.total}
        row.update({f"cls{k + 1}": v for k, v in enumerate(report.cls_stage_losses)})
        row.update({f"reg{k + 1}": v for k, v in enumerate(report.reg_stage_losses)})
        history.rows.append(row)
        if progress is not None:
            progress(step, report)
    return model, history


def predict(model: DetectorModel, cfg: ExperimentConfig, scenes: list[Scene], batch_size: int = 16,
            inference=None) -> dict[int, list[Detection]]:
    inference = inference or cfg.inference
    if model.num_reg_stages == 1 and inference.apply_second_regression:
        inference = dataclasses.replace(inference, apply_second_regression=False)
    anchor_set = generate_anchors(cfg.anchor_config, cfg.data.image_side, cfg.data.image_side)
    out = {}
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start : start + batch_size]
        dets = detect(model, np.concatenate([s.image for s in chunk]), anchor_set, inference)
        for s, d in zip(chunk, dets):
            out[s.index] = d
    return out


def evaluate_model(model, cfg: ExperimentConfig, scenes: list[Scene], inference=None):
    dets = predict(model, cfg, scenes, inference=inference)
    gts = {s.index: s.gts for s in scenes}
    result: EvalResult = evaluate(dets, gts, cfg.data.num_classes, default_size_ranges(cfg.data.image_side))
    return result, dets
