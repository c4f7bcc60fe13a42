"""MAE, max F-measure, S-measure and max E-measure for co-saliency maps.

Conventions: predictions are quantized to 8 bits (round(p * 255)) and a
threshold t in 0..255 binarizes them as q >= t.  EPS = 1e-8 guards every
denominator.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-8
BETA2 = 0.3
THRESHOLDS = np.arange(256)


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt > 0.5


def quantize(pred: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pred, 0, 1) * 255).astype(np.int64)


def mae(pred, gt) -> float:
    pred, g = _check(pred, gt)
    return float(np.mean(np.abs(pred - g)))


def f_measure_curve(pred, gt) -> np.ndarray:
    """F_beta (beta² = 0.3) at each of the 256 thresholds."""
    pred, g = _check(pred, gt)
    q = quantize(pred).ravel()
    g = g.ravel()
    fg_hist = np.bincount(q[g], minlength=256)
    bg_hist = np.bincount(q[~g], minlength=256)
    tp = np.cumsum(fg_hist[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1].astype(np.float64)
    n_pos = float(g.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(n_pos > 0, tp / n_pos, 0.0)
        denom = BETA2 * precision + recall
        return np.where(denom > 0, (1 + BETA2) * precision * recall / denom, 0.0)


def f_measure_max(pred, gt) -> float:
    """Best F over thresholds.  An empty ground truth scores 1 only for an all-zero map."""
    p, g = _check(pred, gt)
    if not g.any():
        return 1.0 if not quantize(p).any() else 0.0
    return float(f_measure_curve(p, g).max())


def e_measure_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment score at each threshold."""
    pred, g = _check(pred, gt)
    q = quantize(pred).ravel()
    binar = (q[None, :] >= THRESHOLDS[:, None]).astype(np.float64)
    if not g.any():
        return 1.0 - binar.mean(axis=1)
    if g.all():
        return binar.mean(axis=1)
    gf = g.ravel().astype(np.float64)
    phi_g = gf - gf.mean()
    phi_b = binar - binar.mean(axis=1, keepdims=True)
    align = 2 * phi_g * phi_b / (phi_g * phi_g + phi_b * phi_b + EPS)
    enhanced = (align + 1) ** 2 / 4
    # correctly rounded sums, so the score does not depend on summation order
    return np.array([math.fsum(row) for row in enhanced]) / enhanced.shape[1]


def e_measure_max(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).max())


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return float(2 * mean / (mean * mean + 1 + sigma + EPS))


def _ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    dof = max(n - 1, 1)
    vx = np.sum((x - mx) ** 2) / dof
    vy = np.sum((y - my) ** 2) / dof
    cov = np.sum((x - mx) * (y - my)) / dof
    alpha = 4 * mx * my * cov
    beta = (mx * mx + my * my) * (vx + vy)
    if beta == 0:
        return 1.0 if (vx == 0 and vy == 0 and mx == my) else 0.0
    return float(alpha / (beta + EPS))


def _centroid(g: np.ndarray) -> tuple[int, int]:
    h, w = g.shape
    if not g.any():
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    cy, cx = np.argwhere(g).mean(axis=0).round()
    return int(cx) + 1, int(cy) + 1


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: object-aware and region-aware similarity, mixed by alpha."""
    pred, g = _check(pred, gt)
    if not g.any():
        return float(np.clip(1 - pred.mean(), 0, 1))
    if g.all():
        return float(np.clip(pred.mean(), 0, 1))
    mu = g.mean()
    s_obj = mu * _object_score(pred[g]) + (1 - mu) * _object_score(1 - pred[~g])

    h, w = g.shape
    cx, cy = _centroid(g)
    gf = g.astype(np.float64)
    s_reg = 0.0
    for rows, cols in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
                       (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))):
        pb, gb = pred[rows, cols], gf[rows, cols]
        if pb.size == 0:
            continue
        s_reg += pb.size / (h * w) * _ssim(pb, gb)
    return float(np.clip(alpha * s_obj + (1 - alpha) * s_reg, 0, 1))


# ----------------------------------------------------------------- reports

@dataclass
class GroupMetrics:
    group: str
    n_images: int
    e_max: float
    s_alpha: float
    f_max: float
    mae: float


@dataclass
class MetricsReport:
    groups: list[GroupMetrics] = field(default_factory=list)

    @property
    def overall(self) -> GroupMetrics:
        """Unweighted mean over groups of the per-group (image-mean) scores."""
        if not self.groups:
            raise ValueError("empty report")
        cols = np.array([[g.e_max, g.s_alpha, g.f_max, g.mae] for g in self.groups])
        e, s, f, m = cols.mean(axis=0)
        return GroupMetrics("ALL", sum(g.n_images for g in self.groups), e, s, f, m)

    def rows(self) -> list[GroupMetrics]:
        return self.groups + [self.overall]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "n_images", "Emax", "S", "Fmax", "MAE"])
        for r in self.rows():
            w.writerow([r.group, r.n_images] + [f"{v:.6f}" for v in (r.e_max, r.s_alpha, r.f_max, r.mae)])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'group':<12}{'n':>5}{'Emax':>9}{'S':>9}{'Fmax':>9}{'MAE':>9}"]
        for r in self.rows():
            lines.append(f"{r.group:<12}{r.n_images:>5}{r.e_max:>9.4f}{r.s_alpha:>9.4f}"
                         f"{r.f_max:>9.4f}{r.mae:>9.4f}")
        return "\n".join(lines)


def score_group(name: str, preds: np.ndarray, gts: np.ndarray) -> GroupMetrics:
    """Image-mean of the four measures over one group of H×W maps."""
    if len(preds) != len(gts) or len(preds) == 0:
        raise ValueError("need matching, non-empty prediction and mask stacks")
    vals = np.array([[e_measure_max(p, g), s_measure(p, g), f_measure_max(p, g), mae(p, g)]
                     for p, g in zip(preds, gts)])
    e, s, f, m = vals.mean(axis=0)
    return GroupMetrics(name, len(preds), float(e), float(s), float(f), float(m))


def evaluate_dataset(checkpoint, manifest, split: str = "eval", use_gam: bool | None = None) -> MetricsReport:
    """Group-wise inference over every class of ``split`` and the four measures per group.

    Only the affinity path runs; the inter-group and classifier heads are not
    used at inference.  ``use_gam`` defaults to the checkpoint's training switch.
    """
    from .inference import predict_group

    ids = manifest.class_ids(split)
    if not ids:
        raise ValueError(f"no classes in split {split!r}")
    gam = checkpoint.train_config.use_gam if use_gam is None else use_gam
    report = MetricsReport()
    for cid in ids:
        images, masks = manifest.load_class(cid)
        preds = predict_group(checkpoint.params, checkpoint.model_config, images, gam)
        report.groups.append(score_group(manifest.class_name(cid), preds, masks[:, 0]))
    return report
