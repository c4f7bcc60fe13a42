"""Group affinity attention, consensus distillation and the inter-group head.

Shapes follow the group convention: a group's features are N×C×H×W, a
consensus is 1×C×1×1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Params, conv
from .tensor import ShapeError, Tensor


@dataclass
class AffinityAttention:
    s_f: Tensor       # NHW × NHW scaled affinity
    a_prime: Tensor   # NHW × N, per-image maxima
    a_f: Tensor       # NHW, mean of the maxima
    a_soft: Tensor    # NHW, softmax of a_f (sums to 1)
    a_s: Tensor       # N×1×H×W, softmax rescaled to mean 1


@dataclass
class GroupState:
    consensus: Tensor
    f_out: Tensor
    attention: AffinityAttention | None


def _pixel_rows(f: Tensor) -> Tensor:
    """N×C×H×W -> (N·H·W)×C, pixels of image 0 first."""
    n, c, h, w = f.shape
    return T.reshape(T.transpose(f, (0, 2, 3, 1)), (n * h * w, c))


def _embed(f: Tensor, w: Tensor) -> Tensor:
    if f.shape[1] != w.shape[1]:
        raise ShapeError(f"embedding expects {w.shape[1]} channels, got {f.shape[1]}")
    return T.conv2d(f, w)


def pairwise_affinity(f_n: Tensor, f_m: Tensor, theta: Tensor, phi: Tensor) -> Tensor:
    """HW×HW inner products between embedded pixels of two C×H×W maps."""
    if f_n.shape[0] != f_m.shape[0]:
        raise ShapeError("channel mismatch between feature maps")
    a = _pixel_rows(_embed(T.reshape(f_n, (1,) + f_n.shape), theta))
    b = _pixel_rows(_embed(T.reshape(f_m, (1,) + f_m.shape), phi))
    return T.matmul(a, T.transpose(b))


def _scale(theta: Tensor, scale: float | None) -> float:
    return 1.0 / np.sqrt(theta.shape[0]) if scale is None else float(scale)


def group_affinity_attention(feats: Tensor, theta: Tensor, phi: Tensor,
                             scale: float | None = None) -> AffinityAttention:
    """Affinity attention over all N·H·W pixels of a group.

    Affinities are multiplied by ``scale`` before the softmax; the default
    1/sqrt(embedding width) keeps the softmax from collapsing onto a handful of
    pixels at initialization.
    """
    n, c, h, w = feats.shape
    if n < 2:
        raise ValueError("group affinity needs at least two images")
    rows = _pixel_rows(_embed(feats, theta)) * _scale(theta, scale)
    cols = _pixel_rows(_embed(feats, phi))
    s_f = T.matmul(rows, T.transpose(cols))
    a_prime, _ = T.reduce_max(T.reshape(s_f, (n * h * w, n, h * w)), axis=2)
    a_f = T.reduce_mean(a_prime, axis=1)
    a_soft = T.softmax(a_f, axis=0)
    a_s = T.reshape(a_soft * float(n * h * w), (n, 1, h, w))
    return AffinityAttention(s_f, a_prime, a_f, a_soft, a_s)


def group_attention_maps(feats: Tensor, theta: Tensor, phi: Tensor, block: int = 1024,
                         scale: float | None = None) -> np.ndarray:
    """Inference-only A_S (N×1×H×W) computed in row blocks to bound memory.

    Same values as ``group_affinity_attention(...).a_s`` without materializing
    the full NHW×NHW affinity.
    """
    n, c, h, w = feats.shape
    if n < 2:
        raise ValueError("group affinity needs at least two images")
    with T.no_grad():
        rows = _pixel_rows(_embed(feats, theta)).data
        cols = _pixel_rows(_embed(feats, phi)).data
    rows = rows * rows.dtype.type(_scale(theta, scale))
    total = n * h * w
    a_f = np.empty(total, dtype=rows.dtype)
    for start in range(0, total, block):
        s = rows[start:start + block] @ cols.T
        a_f[start:start + block] = s.reshape(len(s), n, h * w).max(axis=2).mean(axis=1)
    z = np.exp(a_f - a_f.max())
    return (z / z.sum() * total).reshape(n, 1, h, w)


def attention_consensus(feats: Tensor, a_s: Tensor) -> Tensor:
    """Attention-weighted features averaged over batch and space: 1×C×1×1."""
    if a_s.shape[0] != feats.shape[0] or a_s.shape[2:] != feats.shape[2:]:
        raise ShapeError(f"attention {a_s.shape} does not match features {feats.shape}")
    return T.reduce_mean(feats * a_s, axis=(0, 2, 3), keepdims=True)


def mean_consensus(feats: Tensor) -> Tensor:
    """Plain average pooling over batch and space (the no-attention baseline)."""
    return T.reduce_mean(feats, axis=(0, 2, 3), keepdims=True)


def depthwise_correlate(feats: Tensor, e: Tensor) -> Tensor:
    """Correlate each channel with its 1×1 consensus kernel, i.e. scale it by e[c]."""
    if e.shape != (1, feats.shape[1], 1, 1):
        raise ShapeError(f"consensus {e.shape} does not match {feats.shape[1]} channels")
    return feats * e


def gcm_cross(f1: Tensor, f2: Tensor, e1: Tensor, e2: Tensor):
    """Intra-group pairs (f1·e1, f2·e2) and inter-group pairs (f1·e2, f2·e1)."""
    if f1.shape[1:] != f2.shape[1:]:
        raise ShapeError(f"groups disagree on C×H×W: {f1.shape} vs {f2.shape}")
    plus = (depthwise_correlate(f1, e1), depthwise_correlate(f2, e2))
    minus = (depthwise_correlate(f1, e2), depthwise_correlate(f2, e1))
    return plus, minus


def gcm_predict(f: Tensor, params: Params, out_size: int) -> Tensor:
    """Small conv head, then bilinear upsampling to ``out_size``."""
    x = T.relu(conv(f, params, "gcm.conv1"))
    x = T.relu(conv(x, params, "gcm.conv2"))
    x = conv(x, params, "gcm.out")
    scale = out_size // f.shape[-1]
    if scale * f.shape[-1] != out_size:
        raise ShapeError(f"cannot upsample {f.shape[-1]} to {out_size} by an integer factor")
    return T.upsample_bilinear(x, scale)


def group_forward(feats: Tensor, params: Params, use_gam: bool = True) -> GroupState:
    """Consensus for one group and the decoder input F_out.

    With ``use_gam`` off the consensus is plain mean pooling and no attention
    is computed.
    """
    if use_gam:
        att = group_affinity_attention(feats, params["gam.theta.w"], params["gam.phi.w"])
        e = attention_consensus(feats, att.a_s)
    else:
        att = None
        e = mean_consensus(feats)
    f_out = T.relu(conv(depthwise_correlate(feats, e), params, "gam.proj"))
    return GroupState(e, f_out, att)
