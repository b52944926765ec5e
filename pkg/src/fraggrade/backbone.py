"""Dilated bottleneck ResNet encoder with output stride 8.

Stages 3 and 4 keep stride 1 and use dilations (2, 4) instead. Parameter names
follow torchvision's ResNet layout (conv1, bn1, layer1..layer4) so an
ImageNet state dict maps onto the full profile one-to-one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    profile: str = "toy"
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    stage_depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    dilation_rates: tuple[int, int] = (2, 4)
    input_channels: int = 3
    stem_channels: int = 8

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("backbone needs four stages")
        if any(c % 4 for c in self.stage_channels):
            raise ValueError("stage widths must be divisible by the bottleneck expansion (4)")
        if min(self.dilation_rates) < 1:
            raise ValueError("dilation rates must be >= 1")

    @classmethod
    def full(cls, input_channels: int = 3) -> "BackboneConfig":
        return cls("full", (256, 512, 1024, 2048), (3, 4, 6, 3), (2, 4), input_channels, 64)

    @classmethod
    def toy(cls, input_channels: int = 3) -> "BackboneConfig":
        return cls("toy", (32, 64, 128, 256), (1, 1, 1, 1), (2, 4), input_channels, 8)

    @classmethod
    def for_profile(cls, profile: str, input_channels: int = 3) -> "BackboneConfig":
        if profile == "full":
            return cls.full(input_channels)
        if profile == "toy":
            return cls.toy(input_channels)
        raise ValueError(f"unknown profile {profile!r}")


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor  # stride 4
    f3: torch.Tensor  # stride 8
    f4: torch.Tensor  # stride 8


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, out_ch, stride=1, dilation=1):
        super().__init__()
        mid = out_ch // self.expansion
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.stage_channels
        d3, d4 = config.dilation_rates
        self.conv1 = nn.Conv2d(config.input_channels, config.stem_channels, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(config.stem_channels)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = self._stage(config.stem_channels, c1, config.stage_depths[0], 1, 1)
        self.layer2 = self._stage(c1, c2, config.stage_depths[1], 2, 1)
        self.layer3 = self._stage(c2, c3, config.stage_depths[2], 1, d3)
        self.layer4 = self._stage(c3, c4, config.stage_depths[3], 1, d4)
        self._init_weights()

    @staticmethod
    def _stage(in_ch, out_ch, depth, stride, dilation):
        blocks = [Bottleneck(in_ch, out_ch, stride, dilation)]
        blocks += [Bottleneck(out_ch, out_ch, 1, dilation) for _ in range(depth - 1)]
        return nn.Sequential(*blocks)

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ValueError(
                f"expected (N, {self.config.input_channels}, H, W) input, got {tuple(x.shape)}"
            )
        if min(x.shape[-2:]) < 32:
            raise ValueError(f"input spatial size must be >= 32, got {tuple(x.shape[-2:])}")
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        f4 = self.layer4(f3)
        return FeaturePyramid(f1, f3, f4)

    def load_named_arrays(self, arrays: dict, strict: bool = True) -> None:
        """Load a flat {name: array} map, e.g. a torchvision resnet50 state dict."""
        own = self.state_dict()
        state = {}
        for name, value in arrays.items():
            if name.startswith("fc."):
                continue
            t = torch.as_tensor(value)
            if name in own and own[name].shape != t.shape:
                raise ValueError(f"{name}: shape {tuple(t.shape)} != {tuple(own[name].shape)}")
            state[name] = t
        self.load_state_dict(state, strict=strict)

