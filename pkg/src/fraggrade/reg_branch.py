"""Multi-scale regression head: F3/F4 -> (y_hat in (0, 1), latent V_reg)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn


@dataclass(frozen=True)
class RegHeadConfig:
    proj_channels: int = 64
    hidden: int = 256

    @classmethod
    def full(cls) -> "RegHeadConfig":
        return cls(512, 2048)

    @classmethod
    def toy(cls) -> "RegHeadConfig":
        return cls(64, 256)


class RegressionOutput(NamedTuple):
    y_hat: torch.Tensor  # (N,)
    v_reg: torch.Tensor  # (N, hidden)


class RegBranch(nn.Module):
    def __init__(self, c3: int, c4: int, config: RegHeadConfig):
        super().__init__()
        self.config = config
        self.proj3 = nn.Conv2d(c3, config.proj_channels, 1)
        self.proj4 = nn.Conv2d(c4, config.proj_channels, 1)
        self.fc1 = nn.Linear(2 * config.proj_channels, config.hidden)
        self.fc2 = nn.Linear(config.hidden, 1)

    def pool(self, f3, f4):
        if f3.shape[-2:] != f4.shape[-2:]:
            raise ValueError(
                f"F3 {tuple(f3.shape[-2:])} and F4 {tuple(f4.shape[-2:])} must share spatial size"
            )
        fused = torch.cat([torch.relu(self.proj3(f3)), torch.relu(self.proj4(f4))], dim=1)
        return fused.mean(dim=(-2, -1))

    def forward(self, f3, f4) -> RegressionOutput:
        v_reg = torch.relu(self.fc1(self.pool(f3, f4)))
        y_hat = torch.sigmoid(self.fc2(v_reg)).squeeze(-1)
        return RegressionOutput(y_hat, v_reg)
