"""Joint segmentation + regression network and its parameter groups."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .reg_branch import RegBranch, RegHeadConfig
from .seg_branch import DecoderConfig, Injection, SegBranch

GROUPS = ("backbone", "seg_branch", "reg_branch", "injection")


@dataclass(frozen=True)
class ModelConfig:
    """Wiring switches cover every ablation row.

    attention=False gives the plain DeepLabV3+ skip; inject=False disconnects
    V_reg from the decoder; segmentation/regression drop a whole branch.
    """

    profile: str = "toy"
    input_channels: int = 3
    attention: bool = True
    inject: bool = True
    segmentation: bool = True
    regression: bool = True
    backbone: BackboneConfig = field(default=None)  # type: ignore[assignment]
    decoder: DecoderConfig = field(default=None)  # type: ignore[assignment]
    reg_head: RegHeadConfig = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not (self.segmentation or self.regression):
            raise ValueError("model needs at least one branch")
        if self.backbone is None:
            object.__setattr__(self, "backbone", BackboneConfig.for_profile(self.profile, self.input_channels))
        c1 = self.backbone.stage_channels[0]
        if self.decoder is None:
            object.__setattr__(self, "decoder", DecoderConfig.full(c1) if self.profile == "full" else DecoderConfig.toy(c1))
        if self.reg_head is None:
            object.__setattr__(self, "reg_head", RegHeadConfig.full() if self.profile == "full" else RegHeadConfig.toy())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        sub = {"backbone": BackboneConfig, "decoder": DecoderConfig, "reg_head": RegHeadConfig}
        for key, typ in sub.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()})
        return cls(**d)


class ModelOutputs(NamedTuple):
    mask_logits: Optional[torch.Tensor]  # (N, 1, H, W)
    alpha: Optional[torch.Tensor]  # (N, 1, H/4, W/4)
    y_hat: Optional[torch.Tensor]  # (N,)
    v_reg: Optional[torch.Tensor]  # (N, hidden)


class FragmentNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        bb = config.backbone
        c1, _, c3, c4 = bb.stage_channels
        self.backbone = Backbone(bb)
        self.seg_branch = SegBranch(c1, c4, config.decoder, config.attention) if config.segmentation else None
        self.injection = (
            Injection(config.reg_head.hidden, config.decoder, connected=config.inject and config.regression)
            if config.segmentation else None
        )
        self.reg_branch = RegBranch(c3, c4, config.reg_head) if config.regression else None

    @property
    def v_dim(self) -> int:
        return self.config.reg_head.hidden

    def segment(self, pyramid: FeaturePyramid, v_reg: torch.Tensor, out_size):
        f_dec, alpha = self.seg_branch(pyramid.f1, pyramid.f4)
        return self.injection(f_dec, v_reg, out_size), alpha

    def shared_features(self, x: torch.Tensor):
        """(F3, F4, F_dec, alpha): everything upstream of the regression head and injection."""
        pyr = self.backbone(x)
        f_dec = alpha = None
        if self.seg_branch is not None:
            f_dec, alpha = self.seg_branch(pyr.f1, pyr.f4)
        return pyr.f3, pyr.f4, f_dec, alpha

    def heads(self, f3, f4, f_dec, alpha, out_size) -> ModelOutputs:
        y_hat = v_reg = None
        if self.reg_branch is not None:
            y_hat, v_reg = self.reg_branch(f3, f4)
        logits = None
        if f_dec is not None:
            v = v_reg if v_reg is not None else f3.new_zeros(f3.shape[0], self.v_dim)
            logits = self.injection(f_dec, v, out_size)
        return ModelOutputs(logits, alpha, y_hat, v_reg)

    def forward(self, x: torch.Tensor) -> ModelOutputs:
        return self.heads(*self.shared_features(x), x.shape[-2:])

    # -- parameter groups ------------------------------------------------------

    def group(self, name: str) -> Optional[nn.Module]:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}; expected one of {GROUPS}")
        return getattr(self, name)

    def present_groups(self) -> list[str]:
        return [g for g in GROUPS if getattr(self, g) is not None]

    def group_of(self, qualified_name: str) -> str:
        return qualified_name.split(".", 1)[0]

    def named_arrays(self, groups=None) -> dict[str, np.ndarray]:
        """Dotted-name map of every parameter and buffer (as numpy) in the given groups."""
        groups = set(groups or self.present_groups())
        return {
            k: v.detach().cpu().numpy().copy()
            for k, v in self.state_dict().items()
            if self.group_of(k) in groups
        }

    def group_digest(self, name: str) -> str:
        return arrays_digest(self.named_arrays([name]))

    def digests(self) -> dict[str, str]:
        return {g: self.group_digest(g) for g in self.present_groups()}


def arrays_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def to_input(images, channels: int = 3, dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W) grayscale arrays into an (N, C, H, W) batch, replicating channels."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    t = torch.from_numpy(arr).to(dtype).unsqueeze(1)
    return t.expand(-1, channels, -1, -1).contiguous()
