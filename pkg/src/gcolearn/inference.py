"""Group-wise forward passes without the training-only heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .collaboration import depthwise_correlate, group_attention_maps, mean_consensus
from .model import ModelConfig, Params, conv, decode, encode


def group_consensus(params: Params, config: ModelConfig, images: np.ndarray,
                    use_gam: bool = True) -> tuple[list[T.Tensor], np.ndarray, np.ndarray | None]:
    """Encoder features, the group consensus (1×C×1×1) and, with GAM, the attention maps."""
    with T.no_grad():
        feats = encode(T.Tensor(images), params, config)
        deep = feats[-1]
        if use_gam:
            a_s = group_attention_maps(deep, params["gam.theta.w"], params["gam.phi.w"])
            e = (deep.data * a_s).mean(axis=(0, 2, 3), keepdims=True)
        else:
            a_s = None
            e = mean_consensus(deep).data
    return feats, e, a_s


def predict_group(params: Params, config: ModelConfig, images: np.ndarray,
                  use_gam: bool = True) -> np.ndarray:
    """Saliency probabilities N×H×W for one group of N ≥ 2 images."""
    if len(images) < 2:
        raise ValueError("co-saliency inference needs a group of at least two images")
    feats, e, _ = group_consensus(params, config, images, use_gam)
    with T.no_grad():
        f_out = T.relu(conv(depthwise_correlate(feats[-1], T.Tensor(e)), params, "gam.proj"))
        logits = decode(f_out, feats, params, config)
        return T.sigmoid(logits).data[:, 0]
