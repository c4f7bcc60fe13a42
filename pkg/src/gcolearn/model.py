"""Pyramid encoder, top-down decoder and the auxiliary classifier head.

Parameters live in a flat ``dict[str, Tensor]`` keyed by stable dotted names
(``enc.l2.conv1.w``); insertion order is the canonical order used by the
optimizer and the checkpoint writer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Params = dict[str, Tensor]

# fixed input standardization; mid-gray maps to zero
INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    base_channels: int = 16
    levels: int = 3
    embed_channels: int = 32
    num_classes: int = 8

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.deepest_size < 4 or self.input_size % self.stride(self.levels - 1):
            raise ValueError(f"input_size {self.input_size} too small or not divisible for {self.levels} levels")
        if self.embed_channels < 8:
            raise ValueError("embed_channels must be >= 8")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @staticmethod
    def stride(level: int) -> int:
        return 2 ** level

    @property
    def deepest_size(self) -> int:
        return self.input_size // self.stride(self.levels - 1)

    def level_channels(self, level: int) -> int:
        if level == self.levels - 1:
            return self.embed_channels
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_param(params: Params, gen: np.random.Generator, name: str, cout: int, cin: int, k: int,
                bias: bool = True) -> None:
    fan_in = cin * k * k
    w = gen.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def init_params(config: ModelConfig, seed: int) -> Params:
    """Fan-in scaled normal weights (std sqrt(2 / fan_in)), zero biases."""
    gen = T.rng(seed)
    p: Params = {}
    cin = 3
    for lvl in range(config.levels):
        ch = config.level_channels(lvl)
        _conv_param(p, gen, f"enc.l{lvl + 1}.conv1", ch, cin, 3)
        _conv_param(p, gen, f"enc.l{lvl + 1}.conv2", ch, ch, 3)
        cin = ch
    c = config.embed_channels
    d = config.base_channels
    _conv_param(p, gen, "gam.theta", c, c, 1, bias=False)
    _conv_param(p, gen, "gam.phi", c, c, 1, bias=False)
    _conv_param(p, gen, "gam.proj", c, c, 3)
    _conv_param(p, gen, "dec.top", d, c, 1)
    for lvl in range(config.levels - 2, -1, -1):
        _conv_param(p, gen, f"dec.lat{lvl + 1}", d, config.level_channels(lvl), 1)
        _conv_param(p, gen, f"dec.smooth{lvl + 1}", d, d, 3)
    _conv_param(p, gen, "dec.out", 1, d, 3)
    _conv_param(p, gen, "gcm.conv1", c, c, 3)
    _conv_param(p, gen, "gcm.conv2", c, c, 3)
    _conv_param(p, gen, "gcm.out", 1, c, 3)
    w = gen.standard_normal((c, config.num_classes)) * np.sqrt(2.0 / c)
    p["acm.fc.w"] = Tensor(w, requires_grad=True)
    p["acm.fc.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return p


def param_count(params: Params) -> int:
    return int(sum(t.data.size for t in params.values()))


def conv(x: Tensor, params: Params, name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    pad = w.shape[-1] // 2
    return T.conv2d(x, w, params.get(f"{name}.b"), stride=stride, pad=pad)


def encode(images: Tensor, params: Params, config: ModelConfig) -> list[Tensor]:
    """Per-level feature maps, shallowest first; the last entry feeds the group modules."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected N×3×H×W images, got {images.shape}")
    feats = []
    x = (images - INPUT_MEAN) * (1.0 / INPUT_STD)
    for lvl in range(config.levels):
        if lvl > 0:
            x = T.max_pool2d(x, 2)
        x = T.relu(conv(x, params, f"enc.l{lvl + 1}.conv1"))
        x = T.relu(conv(x, params, f"enc.l{lvl + 1}.conv2"))
        feats.append(x)
    return feats


def decode(f_out: Tensor, skips: list[Tensor], params: Params, config: ModelConfig) -> Tensor:
    """Top-down path from the group-conditioned deepest map to full-resolution logits."""
    if f_out.shape[2:] != skips[-1].shape[2:] or f_out.shape[0] != skips[-1].shape[0]:
        raise ShapeError(f"decoder input {f_out.shape} does not match deepest skip {skips[-1].shape}")
    p = T.relu(conv(f_out, params, "dec.top"))
    for lvl in range(config.levels - 2, -1, -1):
        p = T.upsample_bilinear(p, 2) + conv(skips[lvl], params, f"dec.lat{lvl + 1}")
        p = T.relu(conv(p, params, f"dec.smooth{lvl + 1}"))
    return conv(p, params, "dec.out")


def classify(f: Tensor, params: Params) -> Tensor:
    """Global average pooling followed by one affine layer; returns N×classes logits."""
    pooled = T.reduce_mean(f, axis=(2, 3))
    return T.matmul(pooled, params["acm.fc.w"]) + params["acm.fc.b"]
