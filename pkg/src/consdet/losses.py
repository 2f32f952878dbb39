"""Focal / smooth-L1 losses and the consistent detection objective.

Classification: one shared logit map is supervised by the labels of the
original anchors and, weighted by ``alpha``, by the labels of the refined
anchors (optionally a third, stricter labelling).  Regression: the stage-1
head regresses original anchors, the stage-2 head regresses refined ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .targets import TargetAssignment


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    num_cls_stages: int = 2
    num_reg_stages: int = 2
    smooth_l1_beta: float = 1.0 / 9.0
    # one normalizer (stage-1 positive count) for every classification term
    shared_normalizer: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not (0.0 < self.focal_alpha < 1.0):
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.num_cls_stages not in (1, 2, 3):
            raise ValueError("num_cls_stages must be 1, 2 or 3")
        if self.num_reg_stages not in (1, 2):
            raise ValueError("num_reg_stages must be 1 or 2")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")

    @property
    def is_baseline(self) -> bool:
        return self.num_reg_stages == 1 and (self.num_cls_stages == 1 or self.alpha == 0)


@dataclass
class LossReport:
    cls_stage_losses: list[float]
    reg_stage_losses: list[float]
    total: float
    N_cls: int
    N_reg_per_stage: list[int] = field(default_factory=list)

    @property
    def components_sum(self) -> float:
        return math.fsum(self.cls_stage_losses) + math.fsum(self.reg_stage_losses)


def focal_loss(logit: float, is_positive: bool, gamma: float = 2.0, alpha_f: float | None = 0.25) -> float:
    """Sigmoid focal loss for one logit; ``alpha_f=None`` disables class balancing."""
    loss, _ = T.focal_terms(np.array([float(logit)]), np.array([1.0 if is_positive else 0.0]), gamma, alpha_f)
    return float(loss[0])


def smooth_l1(x: float, beta: float = 1.0 / 9.0) -> float:
    ax = abs(x)
    return 0.5 * x * x / beta if ax < beta else ax - 0.5 * beta


def _check_rows(t: T.Tensor, cols: int | None, n: int, what: str):
    if t.data.ndim != 2 or t.shape[0] != n or (cols is not None and t.shape[1] != cols):
        raise ValueError(f"{what}: expected [{n}, {cols or 'M'}], got {t.shape}")


def cls_terms(logits: T.Tensor, stages: list[TargetAssignment], config: LossConfig):
    """Weighted, normalized classification terms as scalar tensors, plus N_cls."""
    M = logits.shape[1] if logits.data.ndim == 2 else 0
    n_cls = max(1, stages[0].num_positive)
    terms = []
    for k, stage in enumerate(stages):
        _check_rows(logits, None, len(stage), "classification logits")
        raw = T.sigmoid_focal_loss(
            logits, stage.one_hot(M), (~stage.ignored).astype(np.float64), config.focal_gamma, config.focal_alpha
        )
        norm = n_cls if config.shared_normalizer else max(1, stage.num_positive)
        weight = 1.0 if k == 0 else config.alpha
        terms.append((raw, weight, norm))
    return terms, n_cls


def consistent_cls_loss(
    logits: T.Tensor,
    stage1: TargetAssignment,
    stage2: TargetAssignment | None,
    config: LossConfig,
    stage3: TargetAssignment | None = None,
) -> T.Tensor:
    """``(1/N_cls) * sum_i [FL(c_i, c*_i) + alpha * FL(c_i, c+_i) (+ alpha * FL(c_i, c3_i))]``."""
    return _combine_cls(*cls_terms(logits, _cls_stages(stage1, stage2, stage3, config), config))[0]


def _cls_stages(stage1, stage2, stage3, config: LossConfig) -> list[TargetAssignment]:
    stages = [stage1, stage2, stage3][: config.num_cls_stages]
    if any(s is None for s in stages):
        raise ValueError(f"num_cls_stages={config.num_cls_stages} needs that many assignments")
    return stages


def _combine_cls(terms, n_cls):
    """Sum terms as ``(S1 + a*S2 + ...) * (1/N)``; returns (loss, per-term values)."""
    if all(norm == n_cls for _, _, norm in terms):
        acc = terms[0][0]
        for raw, w, _ in terms[1:]:
            acc = acc + raw * w
        loss = acc * (1.0 / n_cls)
    else:
        loss = terms[0][0] * (1.0 / terms[0][2])
        for raw, w, norm in terms[1:]:
            loss = loss + raw * (w / norm)
    parts = [w * raw.item() / norm for raw, w, norm in terms]
    return loss, parts


def reg_terms(offsets1: T.Tensor, offsets2: T.Tensor | None, stage1, stage2, beta: float, num_reg_stages: int):
    pairs = [(offsets1, stage1), (offsets2, stage2)][:num_reg_stages]
    terms = []
    for pred, stage in pairs:
        if pred is None or stage is None:
            raise ValueError(f"num_reg_stages={num_reg_stages} needs that many offset maps and assignments")
        _check_rows(pred, 4, len(stage), "regression offsets")
        n = stage.num_positive
        raw = T.smooth_l1_loss(pred, stage.reg_targets, stage.positive, beta)
        terms.append((raw, max(1, n), n))
    return terms


def consistent_reg_loss(
    offsets1: T.Tensor,
    offsets2: T.Tensor | None,
    stage1: TargetAssignment,
    stage2: TargetAssignment | None,
    beta: float = 1.0 / 9.0,
    num_reg_stages: int = 2,
) -> T.Tensor:
    """``(1/N0) sum_{pos1} SL1(t0 - t*) + (1/N1) sum_{pos2} SL1(t1 - t+)``."""
    terms = reg_terms(offsets1, offsets2, stage1, stage2, beta, num_reg_stages)
    return _combine_reg(terms)[0]


def _combine_reg(terms):
    loss = terms[0][0] * (1.0 / terms[0][1])
    for raw, norm, _ in terms[1:]:
        loss = loss + raw * (1.0 / norm)
    return loss, [raw.item() / norm for raw, norm, _ in terms]


def consistent_loss(outputs, stages: list[TargetAssignment], config: LossConfig) -> tuple[T.Tensor, LossReport]:
    """Full objective for one batch.  ``stages`` holds the stage-1, stage-2
    and (optionally) stage-3 assignments, concatenated over the batch."""
    padded = list(stages) + [None] * (3 - len(stages))
    cterms, n_cls = cls_terms(outputs.cls_logits, _cls_stages(*padded, config), config)
    cls, cls_parts = _combine_cls(cterms, n_cls)
    rterms = reg_terms(
        outputs.offsets_stage1, outputs.offsets_stage2, padded[0], padded[1],
        config.smooth_l1_beta, config.num_reg_stages,
    )
    reg, reg_parts = _combine_reg(rterms)
    total = cls + reg
    report = LossReport(cls_parts, reg_parts, total.item(), n_cls, [n for _, _, n in rterms])
    return total, report


def retinanet_loss(outputs, stage1: TargetAssignment, config: LossConfig) -> tuple[T.Tensor, LossReport]:
    """Plain single-stage objective: focal loss on original-anchor labels plus
    smooth-L1 on their offsets, each normalized by the positive count."""
    logits, offsets = outputs.cls_logits, outputs.offsets_stage1
    M = logits.shape[1]
    n = max(1, stage1.num_positive)
    fl = T.sigmoid_focal_loss(logits, stage1.one_hot(M), (~stage1.ignored).astype(np.float64),
                              config.focal_gamma, config.focal_alpha)
    sl = T.smooth_l1_loss(offsets, stage1.reg_targets, stage1.positive, config.smooth_l1_beta)
    cls = fl * (1.0 / n)
    reg = sl * (1.0 / n)
    total = cls + reg
    return total, LossReport([cls.item()], [reg.item()], total.item(), n, [stage1.num_positive])
