"""Attention-guided decoder: ASPP, gated skip connection and feature injection."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class DecoderConfig:
    aspp_rates: tuple[int, ...] = (12, 24, 36)
    aspp_out_channels: int = 32
    f_int: int = 16
    c_inj: int = 8
    decoder_channels: int = 32
    low_level_channels: int = 6

    def __post_init__(self):
        if len(set(self.aspp_rates)) < 3:
            raise ValueError("ASPP needs at least three distinct dilation rates")
        if self.c_inj < 1:
            raise ValueError("c_inj must be >= 1")

    @classmethod
    def full(cls, c1: int = 256) -> "DecoderConfig":
        return cls((12, 24, 36), 256, c1 // 2, 64, 256, 48)

    @classmethod
    def toy(cls, c1: int = 32) -> "DecoderConfig":
        return cls((12, 24, 36), 32, c1 // 2, 8, 32, 6)


def _conv_bn_relu(in_ch, out_ch, k=1, dilation=1):
    pad = dilation * (k - 1) // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ASPP(nn.Module):
    """1x1 branch, one dilated 3x3 branch per rate, and an image-pooling branch."""

    def __init__(self, in_ch: int, out_ch: int, rates=(12, 24, 36)):
        super().__init__()
        self.branch1x1 = _conv_bn_relu(in_ch, out_ch, 1)
        self.dilated = nn.ModuleList(_conv_bn_relu(in_ch, out_ch, 3, r) for r in rates)
        # no BN on the pooled branch: it sees one value per channel per image
        self.pool_conv = nn.Conv2d(in_ch, out_ch, 1)
        self.project = _conv_bn_relu(out_ch * (len(rates) + 2), out_ch, 1)

    def branches(self, x):
        outs = [self.branch1x1(x)] + [b(x) for b in self.dilated]
        pooled = F.relu(self.pool_conv(F.adaptive_avg_pool2d(x, 1)))
        outs.append(pooled.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return outs

    def forward(self, x):
        return self.project(torch.cat(self.branches(x), dim=1))


class AttentionGate(nn.Module):
    """alpha = sigmoid(psi(relu(W_x F1 + W_g g + b))); returns (alpha, alpha * F1)."""

    def __init__(self, x_ch: int, g_ch: int, f_int: int):
        super().__init__()
        self.W_x = nn.Conv2d(x_ch, f_int, 1, bias=False)
        self.W_g = nn.Conv2d(g_ch, f_int, 1, bias=False)
        self.b = nn.Parameter(torch.zeros(f_int))
        self.psi = nn.Conv2d(f_int, 1, 1)

    def forward(self, f1, g):
        if f1.shape[-2:] != g.shape[-2:]:
            raise ValueError(
                f"gate inputs disagree spatially: F1 {tuple(f1.shape[-2:])} vs g {tuple(g.shape[-2:])}"
            )
        z = self.W_x(f1) + self.W_g(g) + self.b.view(1, -1, 1, 1)
        alpha = torch.sigmoid(self.psi(F.relu(z)))
        return alpha, alpha * f1


class SegBranch(nn.Module):
    """ASPP -> upsample -> (gated) skip -> fused decoder features F_dec at stride 4."""

    def __init__(self, c1: int, c4: int, config: DecoderConfig, attention: bool = True):
        super().__init__()
        self.config = config
        self.attention = attention
        self.aspp = ASPP(c4, config.aspp_out_channels, config.aspp_rates)
        self.gate = AttentionGate(c1, config.aspp_out_channels, config.f_int) if attention else None
        self.low_proj = _conv_bn_relu(c1, config.low_level_channels, 1)
        self.fuse = _conv_bn_relu(config.low_level_channels + config.aspp_out_channels,
                                  config.decoder_channels, 3)

    def forward(self, f1, f4):
        f_aspp = self.aspp(f4)
        g = F.interpolate(f_aspp, size=f1.shape[-2:], mode="bilinear", align_corners=False)
        alpha = None
        skip = f1
        if self.gate is not None:
            alpha, skip = self.gate(f1, g)
        f_dec = self.fuse(torch.cat([self.low_proj(skip), g], dim=1))
        return f_dec, alpha


class Injection(nn.Module):
    """Project V_reg, broadcast it over F_dec's grid, concatenate, predict logits.

    With ``connected=False`` the injected channels are constant zeros, so the
    logits cannot depend on V_reg.
    """

    def __init__(self, v_dim: int, config: DecoderConfig, connected: bool = True):
        super().__init__()
        self.connected = connected
        self.proj = nn.Linear(v_dim, config.c_inj)
        self.head = nn.Sequential(
            _conv_bn_relu(config.decoder_channels + config.c_inj, config.decoder_channels, 3),
            nn.Conv2d(config.decoder_channels, 1, 1),
        )

    def broadcast(self, v_reg, size):
        n = v_reg.shape[0]
        if not self.connected:
            return v_reg.new_zeros(n, self.proj.out_features, *size)
        return self.proj(v_reg)[:, :, None, None].expand(-1, -1, *size)

    def forward(self, f_dec, v_reg, out_size):
        f_inj = self.broadcast(v_reg, f_dec.shape[-2:])
        logits = self.head(torch.cat([f_dec, f_inj], dim=1))
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
