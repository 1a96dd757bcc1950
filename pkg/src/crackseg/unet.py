"""Configurable encoder-decoder segmentation network.

The architecture is the classic U shape: each contracting level applies
two 3x3 same-padded convolutions with ReLU and then 2x2 max pooling
(no pool at the bottleneck); each expanding level upsamples with a
learned 2x2 up-convolution, concatenates the skip tensor from the
matching contracting level, and applies two more 3x3 conv+ReLU pairs.
A 1x1 convolution plus sigmoid produces the single-channel mask.

Channel widths per level follow

    channels[i] = base_channels * 2**i                  (widen_factor == 1)
    channels[i] = max(1, floor(base_channels * widen_factor * 2**i + 0.5))

so ``widen_factor=1.5`` turns the canonical 64/128/256/512/1024 schedule
into 96/192/384/768/1536. Rounding is half-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import concat_channels, conv2d, maxpool2, relu, sigmoid, upconv2
from .tensor import Tensor

__all__ = [
    "UNetConfig",
    "UNetModel",
    "channel_schedule",
    "build",
    "count_parameters",
]


@dataclass(frozen=True)
class UNetConfig:
    """Architecture description: resolution levels, widths, input geometry."""

    depth: int = 5
    base_channels: int = 64
    widen_factor: float = 1.0
    in_channels: int = 1
    input_size: int = 256

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.widen_factor <= 0:
            raise ValueError(f"widen_factor must be > 0, got {self.widen_factor}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        divisor = self.spatial_divisor
        if self.input_size <= 0 or self.input_size % divisor:
            raise ValueError(
                f"input_size must be a positive multiple of {divisor} "
                f"(= 2**(depth-1)) for depth {self.depth}, got {self.input_size}"
            )

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "widen_factor": self.widen_factor,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
        }


def channel_schedule(config: UNetConfig) -> list[int]:
    """Per-level channel counts, widening applied at every level."""
    if config.widen_factor == 1.0:
        return [config.base_channels * 2**i for i in range(config.depth)]
    return [
        max(1, math.floor(config.base_channels * config.widen_factor * 2**i + 0.5))
        for i in range(config.depth)
    ]


def _layer_shapes(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs for every parameter tensor.

    This single listing drives initialization, the closed-form parameter
    count, and checkpoint naming, so the three can never drift apart.
    """
    ch = channel_schedule(config)
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def conv(name: str, cout: int, cin: int, k: int) -> None:
        shapes.append((f"{name}.weight", (cout, cin, k, k)))
        shapes.append((f"{name}.bias", (cout,)))

    prev = config.in_channels
    for i in range(config.depth):
        conv(f"enc{i}.conv1", ch[i], prev, 3)
        conv(f"enc{i}.conv2", ch[i], ch[i], 3)
        prev = ch[i]
    for i in reversed(range(config.depth - 1)):
        conv(f"dec{i}.up", ch[i], ch[i + 1], 2)
        conv(f"dec{i}.conv1", ch[i], 2 * ch[i], 3)
        conv(f"dec{i}.conv2", ch[i], ch[i], 3)
    conv("head", 1, ch[0], 1)
    return shapes


class UNetModel:
    """A config plus its named parameter tensors; immutable during forward."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def forward(self, batch: Tensor) -> Tensor:
        """Map [N,Cin,H,W] to per-pixel crack probabilities [N,1,H,W].

        H and W must each be divisible by 2**(depth-1); any such size is
        accepted (the network is fully convolutional).
        """
        cfg = self.config
        if batch.data.ndim != 4:
            raise ValueError(f"forward: batch must be 4-d [N,C,H,W], got shape {batch.shape}")
        n, c, h, w = batch.shape
        if c != cfg.in_channels:
            raise ValueError(f"forward: batch has {c} channels, model expects {cfg.in_channels}")
        divisor = cfg.spatial_divisor
        if h % divisor or w % divisor:
            raise ValueError(
                f"forward: spatial dims {h}x{w} must be divisible by {divisor} "
                f"(= 2**(depth-1)) for depth {cfg.depth}"
            )

        p = self.params
        skips = []
        x = batch
        for i in range(cfg.depth):
            x = relu(conv2d(x, p[f"enc{i}.conv1.weight"], p[f"enc{i}.conv1.bias"]))
            x = relu(conv2d(x, p[f"enc{i}.conv2.weight"], p[f"enc{i}.conv2.bias"]))
            if i < cfg.depth - 1:
                skips.append(x)
                x = maxpool2(x)
        for i in reversed(range(cfg.depth - 1)):
            x = upconv2(x, p[f"dec{i}.up.weight"], p[f"dec{i}.up.bias"])
            x = concat_channels(skips[i], x)
            x = relu(conv2d(x, p[f"dec{i}.conv1.weight"], p[f"dec{i}.conv1.bias"]))
            x = relu(conv2d(x, p[f"dec{i}.conv2.weight"], p[f"dec{i}.conv2.bias"]))
        return sigmoid(conv2d(x, p["head.weight"], p["head.bias"]))

    __call__ = forward


def build(config: UNetConfig, seed: int, dtype=np.float32) -> UNetModel:
    """Instantiate a model with He-uniform weights and zero biases.

    Weights draw from U(-b, b) with b = sqrt(6 / fan_in), fan_in being
    cin*kh*kw. Parameter creation order is fixed, so identical seeds
    give bit-identical models.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            limit = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return UNetModel(config, params)


def count_parameters(config: UNetConfig) -> int:
    """Total scalar parameter count for a config.

    Closed form: sum over every conv layer of cout*cin*k*k + cout, with
    layers as laid out in the module docstring (two 3x3 convs per level
    on both paths, a 2x2 up-conv per expanding level, and the 1x1 head).
    """
    return sum(int(np.prod(shape)) for _, shape in _layer_shapes(config))
