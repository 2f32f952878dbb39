"""A tiny single-shot detector with two regression output layers.

Backbone: stride-2 conv blocks; the last block feeds the finest anchor level
and each further level is a 2x max-pool of the previous one.  A shared head
trunk runs on every level and feeds three output convs: class logits,
stage-1 offsets and (when consistent regression is enabled) stage-2 offsets.
Only that last regression layer is extra relative to a plain detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .anchors import AnchorConfig, AnchorSet
from .losses import LossConfig, LossReport, consistent_loss, retinanet_loss
from .targets import MatchThresholds, TargetAssignment, assign, refine_anchors


@dataclass(frozen=True)
class ModelConfig:
    backbone_channels: tuple[int, ...] = (16, 32, 32)
    trunk_channels: tuple[int, ...] = (32, 32)
    kernel: int = 3
    in_channels: int = 1
    prior_prob: float = 0.01
    output_init_std: float = 0.01

    def __post_init__(self):
        if not self.backbone_channels:
            raise ValueError("backbone needs at least one conv block")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if not (0.0 < self.prior_prob < 1.0):
            raise ValueError("prior_prob must lie in (0, 1)")


@dataclass
class DetectorOutputs:
    """Per-anchor predictions, rows in :func:`generate_anchors` order (image-major for batches)."""

    cls_logits: T.Tensor  # [B*A, M]
    offsets_stage1: T.Tensor  # [B*A, 4]
    offsets_stage2: T.Tensor | None  # [B*A, 4]
    batch_size: int = 1

    @property
    def num_anchors(self) -> int:
        return self.cls_logits.shape[0] // self.batch_size


class DetectorModel:
    def __init__(
        self,
        model_config: ModelConfig,
        anchor_config: AnchorConfig,
        num_classes: int,
        num_reg_stages: int = 2,
        seed: int = 0,
    ):
        nb = len(model_config.backbone_channels)
        expected = tuple(2 ** (nb + i) for i in range(len(anchor_config.levels)))
        if anchor_config.strides != expected:
            raise ValueError(
                f"{nb} backbone blocks give level strides {expected}, anchors use {anchor_config.strides}"
            )
        if num_reg_stages not in (1, 2):
            raise ValueError("num_reg_stages must be 1 or 2")
        self.config = model_config
        self.anchor_config = anchor_config
        self.num_classes = num_classes
        self.num_reg_stages = num_reg_stages
        self.params: dict[str, T.Tensor] = {}

        rng = T.make_rng(seed)
        k = model_config.kernel
        A = anchor_config.anchors_per_cell
        c_in = model_config.in_channels
        for i, c in enumerate(model_config.backbone_channels):
            self._he_conv(rng, f"backbone.{i}", c_in, c, k)
            c_in = c
        for i, c in enumerate(model_config.trunk_channels):
            self._he_conv(rng, f"trunk.{i}", c_in, c, k)
            c_in = c
        self.head_channels = c_in
        prior_bias = -math.log((1 - model_config.prior_prob) / model_config.prior_prob)
        self._output_conv(rng, "cls", c_in, A * num_classes, k, prior_bias)
        self._output_conv(rng, "reg1", c_in, A * 4, k, 0.0)
        if num_reg_stages == 2:
            self._output_conv(rng, "reg2", c_in, A * 4, k, 0.0)

    def _he_conv(self, rng, name, c_in, c_out, k):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.params[f"{name}.weight"] = T.parameter(rng.standard_normal((c_out, c_in, k, k)) * std, f"{name}.weight")
        self.params[f"{name}.bias"] = T.parameter(np.zeros(c_out), f"{name}.bias")

    def _output_conv(self, rng, name, c_in, c_out, k, bias):
        w = rng.standard_normal((c_out, c_in, k, k)) * self.config.output_init_std
        self.params[f"{name}.weight"] = T.parameter(w, f"{name}.weight")
        self.params[f"{name}.bias"] = T.parameter(np.full(c_out, bias), f"{name}.bias")

    # ------------------------------------------------------------------

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path):
        T.save_checkpoint(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(T.load_checkpoint(path))

    # ------------------------------------------------------------------

    def _conv(self, x, name, stride=1):
        pad = self.config.kernel // 2
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, padding=pad)

    def _flatten(self, x: T.Tensor, per_anchor: int) -> T.Tensor:
        n, _, h, w = x.shape
        x = T.transpose(x, (0, 2, 3, 1))
        return T.reshape(x, (n, h * w * self.anchor_config.anchors_per_cell, per_anchor))

    def forward(self, image) -> DetectorOutputs:
        x = T.as_tensor(image)
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected images shaped [B, {self.config.in_channels}, H, W], got {x.shape}")
        B, _, H, W = x.shape
        top = self.anchor_config.strides[-1]
        if H % top or W % top:
            raise ValueError(f"image size {W}x{H} is not divisible by the largest stride {top}")

        for i in range(len(self.config.backbone_channels)):
            x = T.relu(self._conv(x, f"backbone.{i}", stride=2))
        levels = [x]
        for _ in self.anchor_config.levels[1:]:
            levels.append(T.max_pool2d(levels[-1], 2))

        cls, reg1, reg2 = [], [], []
        for feat in levels:
            h = feat
            for i in range(len(self.config.trunk_channels)):
                h = T.relu(self._conv(h, f"trunk.{i}"))
            cls.append(self._flatten(self._conv(h, "cls"), self.num_classes))
            reg1.append(self._flatten(self._conv(h, "reg1"), 4))
            if self.num_reg_stages == 2:
                reg2.append(self._flatten(self._conv(h, "reg2"), 4))

        def join(parts, cols):
            cat = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
            return T.reshape(cat, (-1, cols))

        return DetectorOutputs(
            cls_logits=join(cls, self.num_classes),
            offsets_stage1=join(reg1, 4),
            offsets_stage2=join(reg2, 4) if reg2 else None,
            batch_size=B,
        )

    __call__ = forward


def build_assignments(
    outputs: DetectorOutputs,
    anchor_set: AnchorSet,
    gts_batch: list,
    thresholds: list[MatchThresholds],
    loss_config: LossConfig,
    num_classes: int | None = None,
) -> list[TargetAssignment]:
    """Stage-1 labels on the original anchors, stage-2 (and stage-3) labels on
    anchors refined by the current stage-1 offsets, read by value."""
    A = len(anchor_set)
    need_refined = loss_config.num_cls_stages >= 2 or loss_config.num_reg_stages == 2
    n_stages = max(loss_config.num_cls_stages, 2 if need_refined else 1)
    if len(thresholds) < n_stages:
        raise ValueError(f"{n_stages} stages need {n_stages} threshold pairs, got {len(thresholds)}")
    t0 = outputs.offsets_stage1.data.reshape(outputs.batch_size, A, 4)
    per_stage: list[list[TargetAssignment]] = [[] for _ in range(n_stages)]
    for b, gts in enumerate(gts_batch):
        per_stage[0].append(assign(anchor_set.boxes, gts, thresholds[0], 1, num_classes))
        if n_stages > 1:
            refined = refine_anchors(anchor_set.boxes, t0[b])
            for s in range(1, n_stages):
                per_stage[s].append(assign(refined, gts, thresholds[s], s + 1, num_classes))
    return [TargetAssignment.concat(parts) for parts in per_stage]


def training_step(
    model: DetectorModel,
    images,
    gts_batch: list,
    anchor_set: AnchorSet,
    loss_config: LossConfig,
    thresholds: list[MatchThresholds],
    optimizer: T.SGD,
    lr: float | None = None,
) -> LossReport:
    """Forward, assign both stages, evaluate the consistent objective, backprop, update."""
    if len(gts_batch) != np.shape(images)[0]:
        raise ValueError("need one ground-truth list per image")
    with T.Tape() as tape:
        outputs = model(images)
        stages = build_assignments(outputs, anchor_set, gts_batch, thresholds, loss_config, model.num_classes)
        total, report = consistent_loss(outputs, stages, loss_config)
        tape.backward(total, model.parameters())
    optimizer.step(lr)
    return report


def baseline_training_step(
    model: DetectorModel,
    images,
    gts_batch: list,
    anchor_set: AnchorSet,
    loss_config: LossConfig,
    thresholds: MatchThresholds,
    optimizer: T.SGD,
    lr: float | None = None,
) -> LossReport:
    """Reference single-stage step: original-anchor labels only."""
    with T.Tape() as tape:
        outputs = model(images)
        stage1 = TargetAssignment.concat(
            [assign(anchor_set.boxes, gts, thresholds, 1, model.num_classes) for gts in gts_batch]
        )
        total, report = retinanet_loss(outputs, stage1, loss_config)
        tape.backward(total, model.parameters())
    optimizer.step(lr)
    return report
