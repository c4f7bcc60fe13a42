"""Saliency, inter-group and classification objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

IOU_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    sal: float = 1.0
    ctm: float = 1.0
    cls: float = 1.0

    def __post_init__(self):
        vals = (self.sal, self.ctm, self.cls)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError(f"loss weights must be >= 0 with at least one positive, got {vals}")


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0 or not 0 <= self.alpha <= 1:
            raise ValueError(f"invalid focal config {self}")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, branch: str, value: float):
        super().__init__(f"non-finite loss in branch {branch}: {value}")
        self.branch = branch


def _binary(gt: Tensor | np.ndarray) -> Tensor:
    gt = T.as_tensor(gt)
    if not np.all((gt.data == 0) | (gt.data == 1)):
        raise ValueError("ground truth must be binary {0, 1}")
    return gt


def soft_iou_loss(pred: Tensor, gt) -> Tensor:
    """Mean over images of 1 - (Σpg + ε) / (Σp + Σg - Σpg + ε)."""
    gt = _binary(gt)
    axes = tuple(range(1, pred.ndim))
    inter = T.reduce_sum(pred * gt, axis=axes)
    union = T.reduce_sum(pred, axis=axes) + T.reduce_sum(gt, axis=axes) - inter
    return T.reduce_mean(1.0 - (inter + IOU_EPS) / (union + IOU_EPS))


saliency_loss = soft_iou_loss


def focal_loss(logits: Tensor, target, cfg: FocalConfig = FocalConfig()) -> Tensor:
    """-α_t (1 - p_t)^γ log p_t from logits; pixel mean per image, then mean over images.

    log p_t is evaluated as -softplus(∓logit) so saturated logits stay finite.
    """
    target = _binary(target)
    sign = 1.0 - 2.0 * target.data          # -1 for positives, +1 for negatives
    z = logits * T.Tensor(sign)             # z = -logit (pos) / +logit (neg)
    log_pt = -T.softplus(z)
    alpha_t = np.where(target.data == 1, cfg.alpha, 1.0 - cfg.alpha)
    if cfg.gamma == 0:
        per_pixel = -log_pt * T.Tensor(alpha_t)
    else:
        one_minus_pt = T.sigmoid(z)
        per_pixel = -(T.power(one_minus_pt, cfg.gamma) * log_pt) * T.Tensor(alpha_t)
    per_image = T.reduce_mean(per_pixel, axis=tuple(range(1, logits.ndim)))
    return T.reduce_mean(per_image)


def gcm_loss(m_plus: Tensor, m_minus: Tensor, gt, cfg: FocalConfig = FocalConfig()) -> Tensor:
    """Focal loss of same-group maps against the masks plus cross-group maps against zeros."""
    gt = _binary(gt)
    if m_plus.shape != gt.shape or m_minus.shape != gt.shape:
        raise ValueError(f"map shapes {m_plus.shape}, {m_minus.shape} must equal mask shape {gt.shape}")
    zeros = T.Tensor(np.zeros(gt.shape))
    return focal_loss(m_plus, gt, cfg) + focal_loss(m_minus, zeros, cfg)


def classification_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {n} integers in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -T.reduce_sum(T.log_softmax(logits, axis=1) * T.Tensor(onehot)) / float(n)


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """λ1·sal + λ2·ctm + λ3·cls over whichever parts are present.

    Raises NonFiniteLoss naming the first branch whose value is NaN or inf.
    """
    total = None
    for name in ("sal", "ctm", "cls"):
        part = parts.get(name)
        if part is None:
            continue
        value = float(part.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(name, value)
        lam = getattr(weights, name)
        if lam == 0:
            continue
        term = part * lam
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss term with positive weight")
    return total
