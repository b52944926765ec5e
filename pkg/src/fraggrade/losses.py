"""Training objectives: segmentation, precise/range regression, consistency, total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .grading import Grade, grade_to_interval


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # L_seg
    beta: float = 1.0  # L_reg
    gamma: float = 0.1  # L_cons
    w_bce: float = 1.0
    w_dice: float = 1.0
    w_focal: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "w_bce", "w_dice", "w_focal", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if not 0 <= self.focal_alpha <= 1:
            raise ValueError("focal_alpha must lie in [0, 1]")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")


def _check_binary(gt: torch.Tensor) -> None:
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")


def bce_term(logits, gt):
    return F.binary_cross_entropy_with_logits(logits, gt, reduction="mean")


def dice_term(logits, gt, smooth=1.0):
    """1 - soft Dice, with overlap summed over the whole batch."""
    p = torch.sigmoid(logits)
    inter = (p * gt).sum()
    return 1 - (2 * inter + smooth) / (p.sum() + gt.sum() + smooth)


def focal_term(logits, gt, gamma=2.0, alpha=0.25):
    logp = F.logsigmoid(logits)
    log1mp = F.logsigmoid(-logits)
    p = logp.exp()
    pos = -alpha * (1 - p) ** gamma * logp
    neg = -(1 - alpha) * p ** gamma * log1mp
    return (gt * pos + (1 - gt) * neg).mean()


def seg_loss(mask_logits, gt_mask, w: LossWeights = LossWeights(), parts: bool = False):
    gt = gt_mask.to(mask_logits.dtype)
    if gt.shape != mask_logits.shape:
        raise ValueError(f"shape mismatch: logits {tuple(mask_logits.shape)} vs gt {tuple(gt.shape)}")
    _check_binary(gt)
    terms = {
        "bce": bce_term(mask_logits, gt),
        "dice": dice_term(mask_logits, gt, w.dice_smooth),
        "focal": focal_term(mask_logits, gt, w.focal_gamma, w.focal_alpha),
    }
    total = w.w_bce * terms["bce"] + w.w_dice * terms["dice"] + w.w_focal * terms["focal"]
    return (total, terms) if parts else total


def range_loss(y_hat, grade: Union[Grade, str, Sequence]):
    """ReLU(y_min - y_hat) + ReLU(y_hat - y_max), elementwise."""
    if isinstance(grade, (Grade, str)):
        iv = grade_to_interval(grade)
        lo, hi = iv.y_min, iv.y_max
    else:
        ivs = [grade_to_interval(g) for g in grade]
        lo = torch.tensor([iv.y_min for iv in ivs], dtype=y_hat.dtype, device=y_hat.device)
        hi = torch.tensor([iv.y_max for iv in ivs], dtype=y_hat.dtype, device=y_hat.device)
    return torch.relu(lo - y_hat) + torch.relu(y_hat - hi)


def precise_loss(y_hat, ratio):
    return (y_hat - ratio).abs()


def reg_loss(y_hat, ratio: Optional[float] = None, grade=None):
    """L1 against the exact ratio when known, range hinge on the grade otherwise."""
    if ratio is not None:
        return precise_loss(y_hat, ratio)
    if grade is not None:
        return range_loss(y_hat, grade)
    raise ValueError("regression target needs a ratio or a grade")


def batch_reg_loss(y_hat, ratios: Sequence[Optional[float]], grades: Sequence):
    """Per-sample dispatch over a mixed paired/weak batch; returns the mean."""
    losses = [reg_loss(y_hat[i], r, g) for i, (r, g) in enumerate(zip(ratios, grades))]
    return torch.stack(losses).mean()


def soft_area_ratio(mask_logits, embryo_area):
    area = torch.as_tensor(embryo_area, dtype=mask_logits.dtype, device=mask_logits.device)
    if torch.any(area <= 0):
        raise ValueError("embryo_area must be > 0")
    soft = torch.sigmoid(mask_logits).flatten(1).sum(dim=1)
    return torch.clamp(soft / area, 0.0, 1.0)


def consistency_loss(y_hat, mask_logits, embryo_area):
    """|y_hat - clamp(sum(sigmoid(logits)) / embryo_area, 0, 1)|, mean over the batch."""
    if mask_logits.dim() == 2:
        mask_logits = mask_logits.unsqueeze(0)
    y = torch.as_tensor(y_hat, dtype=mask_logits.dtype).reshape(-1)
    return (y - soft_area_ratio(mask_logits, embryo_area)).abs().mean()


LossPart = Union[torch.Tensor, Callable[[], torch.Tensor]]


def total_loss(parts: Mapping[str, LossPart], w: LossWeights = LossWeights()):
    """alpha*seg + beta*reg + gamma*cons.

    Parts may be zero-argument callables; a callable whose weight is zero (or
    that is missing) is never invoked, so e.g. beta=0 never touches targets.
    """
    total = None
    for key, weight in (("seg", w.alpha), ("reg", w.beta), ("cons", w.gamma)):
        if weight == 0 or parts.get(key) is None:
            continue
        part = parts[key]
        value = part() if callable(part) else part
        if not torch.isfinite(value).all():
            raise ValueError(f"loss part {key} is not finite")
        total = weight * value if total is None else total + weight * value
    return total if total is not None else torch.zeros(())
