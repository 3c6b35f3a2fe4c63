"""Encoder-decoder network assembled from the tensor engine's blocks.

Fixed topology, one logit channel per landmark label:

* encoder level ``i`` (0-based, ``depth`` levels): two 3x3 same convs + relu
  at ``base_channels * 2**i`` channels, then 2x2 max pool;
* bottleneck: two 3x3 convs + relu at ``base_channels * 2**depth``;
* decoder level ``i`` (mirroring the encoder): nearest 2x upsample, a 3x3
  conv + relu halving the channels, concatenation with the level-``i`` skip,
  then two 3x3 convs + relu back at ``base_channels * 2**i``;
* head: one 3x3 conv to ``num_labels`` channels, no activation (logits).

Weights use He initialization (normal with std sqrt(2 / fan_in)); biases
start at zero. Input spatial dims must be divisible by ``2**depth``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_checkpoint
from .rng import RngState, STREAM_MODEL_INIT
from .tensor import Parameter, Tensor, concat_channels, conv2d, maxpool2, relu, upsample2


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_labels: int = 1
    depth: int = 3
    base_channels: int = 8

    def __post_init__(self) -> None:
        for name in ("in_channels", "num_labels", "depth", "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


def layer_plan(config: UNetConfig) -> list[tuple[str, int, int]]:
    """Conv layers as (name, in_channels, out_channels), in creation order."""
    b, d = config.base_channels, config.depth
    plan: list[tuple[str, int, int]] = []
    prev = config.in_channels
    for i in range(d):
        ch = b * 2**i
        plan.append((f"enc{i}.conv1", prev, ch))
        plan.append((f"enc{i}.conv2", ch, ch))
        prev = ch
    mid = b * 2**d
    plan.append(("bottleneck.conv1", prev, mid))
    plan.append(("bottleneck.conv2", mid, mid))
    for i in reversed(range(d)):
        ch = b * 2**i
        plan.append((f"dec{i}.up", ch * 2, ch))
        plan.append((f"dec{i}.conv1", ch * 2, ch))
        plan.append((f"dec{i}.conv2", ch, ch))
    plan.append(("head", b, config.num_labels))
    return plan


def parameter_count(config: UNetConfig) -> int:
    """Total trainable scalars; each 3x3 conv has 9*cin*cout weights + cout biases."""
    return sum(9 * cin * cout + cout for _, cin, cout in layer_plan(config))


class UNet:
    """U-Net with named parameters; forward maps (N, in, H, W) -> (N, K, H, W)."""

    def __init__(self, config: UNetConfig, rng: RngState, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        gen = rng.generator(STREAM_MODEL_INIT)
        for name, cin, cout in layer_plan(config):
            std = math.sqrt(2.0 / (9 * cin))
            w = gen.standard_normal((cout, cin, 3, 3)) * std
            self.params[f"{name}.weight"] = Parameter(w.astype(self.dtype), f"{name}.weight")
            self.params[f"{name}.bias"] = Parameter(
                np.zeros(cout, dtype=self.dtype), f"{name}.bias"
            )

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _conv(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input (N, {self.config.in_channels}, H, W), got shape {x.shape}"
            )
        h, w = x.data.shape[2:]
        divisor = 2**self.config.depth
        if h % divisor or w % divisor:
            raise ValueError(
                f"input spatial dims {h}x{w} must be divisible by 2^depth = {divisor}; "
                f"pad the input or reduce depth"
            )
        skips: list[Tensor] = []
        for i in range(self.config.depth):
            x = relu(self._conv(f"enc{i}.conv1", x))
            x = relu(self._conv(f"enc{i}.conv2", x))
            skips.append(x)
            x = maxpool2(x)
        x = relu(self._conv("bottleneck.conv1", x))
        x = relu(self._conv("bottleneck.conv2", x))
        for i in reversed(range(self.config.depth)):
            x = upsample2(x)
            x = relu(self._conv(f"dec{i}.up", x))
            x = concat_channels(x, skips[i])
            x = relu(self._conv(f"dec{i}.conv1", x))
            x = relu(self._conv(f"dec{i}.conv2", x))
        return self._conv("head", x)

    __call__ = forward

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        """Strict load: every model parameter must be present with its shape."""
        for name, p in self.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = tensors[name]
            if tuple(arr.shape) != p.data.shape:
                raise ValueError(
                    f"shape conflict for {name!r}: checkpoint {tuple(arr.shape)}, "
                    f"model {p.data.shape}"
                )
            p.data = arr.astype(self.dtype)
            p.zero_grad()


@dataclass
class WeightLoadReport:
    matched: list[str] = field(default_factory=list)
    unmatched_checkpoint: list[str] = field(default_factory=list)
    unmatched_model: list[str] = field(default_factory=list)


def load_encoder_weights(model: UNet, path) -> WeightLoadReport:
    """Copy checkpoint entries into the model wherever names and shapes match.

    Intended for warm-starting from external (e.g. pretrained-encoder)
    weights: matched parameters are replaced, everything else keeps its
    initialization. A matched name with a conflicting shape is an error.
    """
    tensors = read_checkpoint(path)
    report = WeightLoadReport()
    for name, arr in tensors.items():
        if name in model.params:
            p = model.params[name]
            if tuple(arr.shape) != p.data.shape:
                raise ValueError(
                    f"shape conflict for {name!r}: checkpoint {tuple(arr.shape)}, "
                    f"model {p.data.shape}"
                )
            p.data = arr.astype(model.dtype)
            report.matched.append(name)
        else:
            report.unmatched_checkpoint.append(name)
    report.unmatched_model = [n for n in model.params if n not in tensors]
    return report
