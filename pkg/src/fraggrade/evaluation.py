"""Metrics, per-image grading, gradient-conflict diagnostic and the ablation harness."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import (
    DatasetSplit, ImageSample, PhantomConfig, apply_pad_record, build_split, estimate_embryo_mask, preprocess,
)
from .grading import mask_to_ratio, ratio_to_grade
from .losses import LossWeights, batch_reg_loss, seg_loss
from .model import FragmentNet, ModelConfig, to_input
from .training import (
    Checkpoint, PhaseConfig, build_model, train_full_mtl, train_phase1, train_phase2,
)

log = logging.getLogger(__name__)

# Published clinical results for the same row set. Orientation only, never a gate.
REFERENCE_DICE = {"Baseline": 0.717, "Exp A": 0.729, "Exp C": 0.716, "Exp D": 0.729, "Exp E": 0.678}
REFERENCE_MAE = {"Exp B1": 0.057, "Exp B2": 0.051, "Exp C": 0.046, "Exp D": 0.049, "Exp E": 0.053}

THRESHOLD_LOGIT = 0.0  # probability 0.5


def dice(pred_mask, gt_mask) -> float:
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def mae(pairs: Sequence[tuple[float, float]]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mae of an empty list is undefined")
    return float(np.mean([abs(a - b) for a, b in pairs]))


@torch.no_grad()
def predict(model: FragmentNet, images: Sequence[np.ndarray], batch_size: int = 8):
    """Run the model in eval mode; returns numpy logits (N,H,W), alpha, y_hat."""
    model.eval()
    dtype = next(model.parameters()).dtype
    logits, alphas, ys = [], [], []
    for i in range(0, len(images), batch_size):
        x = to_input(images[i:i + batch_size], model.config.input_channels, dtype)
        out = model(x)
        if out.mask_logits is not None:
            logits.append(out.mask_logits[:, 0].float().numpy())
        if out.alpha is not None:
            alphas.append(out.alpha[:, 0].float().numpy())
        if out.y_hat is not None:
            ys.append(out.y_hat.double().numpy())
    cat = lambda xs: np.concatenate(xs) if xs else None  # noqa: E731
    return cat(logits), cat(alphas), cat(ys)


def _grades_from(logits, embryo):
    mask = (logits > THRESHOLD_LOGIT) & embryo
    y = mask_to_ratio(mask, embryo) if embryo.any() else None
    return mask, y


def grade_sample(model: FragmentNet, image: np.ndarray, embryo_mask: Optional[np.ndarray] = None) -> dict:
    """Grade one image from both heads.

    The predicted mask is restricted to the embryo estimate (fragments lie inside
    the embryo), so y_from_mask equals the hard-mask area ratio.
    """
    image = np.asarray(image, dtype=np.float32)
    if embryo_mask is not None:
        embryo_mask = np.asarray(embryo_mask, bool)
        if embryo_mask.shape != image.shape:
            raise ValueError(f"embryo mask shape {embryo_mask.shape} != image shape {image.shape}")
    if image.shape != (299, 299):
        image, record = preprocess(image)
        if embryo_mask is not None:
            embryo_mask = apply_pad_record(embryo_mask, record, nearest=True)
    embryo = estimate_embryo_mask(image) if embryo_mask is None else embryo_mask
    logits, alpha, y = predict(model, [image])
    res = {"y_direct": None, "y_from_mask": None, "grade_direct": None,
           "grade_from_mask": None, "mask": None, "alpha": None, "embryo_mask": embryo}
    if y is not None:
        res["y_direct"] = float(y[0])
        res["grade_direct"] = ratio_to_grade(min(max(res["y_direct"], 0.0), 1.0))
    if logits is not None:
        mask, y_mask = _grades_from(logits[0], embryo)
        res["mask"] = mask
        res["logits"] = logits[0]
        res["y_from_mask"] = y_mask
        if y_mask is not None:
            res["grade_from_mask"] = ratio_to_grade(y_mask)
    if alpha is not None:
        res["alpha"] = alpha[0]
    return res


def evaluate(model: FragmentNet, samples: Sequence[ImageSample], batch_size: int = 8) -> dict:
    """Mean per-sample Dice, MAE of the regression head, MAE of the mask-derived ratio."""
    if not samples:
        raise ValueError("no evaluation samples")
    logits, _, y = predict(model, [s.image for s in samples], batch_size)
    out: dict = {"n_val": len(samples)}
    if logits is not None:
        dices, pairs = [], []
        for k, s in enumerate(samples):
            pred = logits[k] > THRESHOLD_LOGIT
            dices.append(dice(pred, s.fragment_mask))
            emb = estimate_embryo_mask(s.image)
            _, y_mask = _grades_from(logits[k], emb)
            if y_mask is not None:
                pairs.append((y_mask, s.ratio))
        out["dice"] = float(np.mean(dices))
        out["mae_from_mask"] = mae(pairs) if pairs else None
    if y is not None:
        out["mae_direct"] = mae([(float(y[k]), s.ratio) for k, s in enumerate(samples)])
    return out


# -- gradient conflict -----------------------------------------------------------

LossFn = Callable[[object, dict], torch.Tensor]


def default_seg_fn(out, batch):
    return seg_loss(out.mask_logits, batch["masks"])


def default_reg_fn(out, batch):
    return batch_reg_loss(out.y_hat, batch["ratios"], batch["grades"])


def make_batch(samples: Sequence[ImageSample], channels: int = 3, dtype=torch.float32) -> dict:
    return {
        "x": to_input([s.image for s in samples], channels, dtype),
        "masks": torch.from_numpy(np.stack([s.fragment_mask for s in samples]).astype(np.float32))
        .unsqueeze(1).to(dtype),
        "ratios": [s.ratio for s in samples],
        "grades": [s.grade for s in samples],
    }


def cosine(a: torch.Tensor, b: torch.Tensor) -> Optional[float]:
    a, b = a.double(), b.double()
    na, nb = float(a @ a), float(b @ b)
    if na == 0 or nb == 0:
        return None
    c = float(a @ b) / math.sqrt(na * nb)
    return max(-1.0, min(1.0, c))


def shared_gradients(model: FragmentNet, batch: dict, fn_a: LossFn, fn_b: LossFn):
    model.eval()
    params = [p for p in model.backbone.parameters()]
    for p in params:
        p.requires_grad_(True)
    out = model(batch["x"])
    ga = torch.autograd.grad(fn_a(out, batch), params, retain_graph=True, allow_unused=True)
    gb = torch.autograd.grad(fn_b(out, batch), params, allow_unused=True)
    flat = lambda gs: torch.cat([  # noqa: E731
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(gs, params)
    ])
    return flat(ga), flat(gb)


def gradient_conflict(model: FragmentNet, batch: dict, seg_fn: LossFn = default_seg_fn,
                      reg_fn: LossFn = default_reg_fn) -> Optional[float]:
    """Cosine between the segmentation and regression gradients on the shared
    backbone; None when either gradient vanishes."""
    if model.seg_branch is None or model.reg_branch is None:
        raise ValueError("gradient conflict needs both branches")
    ga, gb = shared_gradients(model, batch, seg_fn, reg_fn)
    return cosine(ga, gb)


# -- ablation ------------------------------------------------------------------------

METRIC_KEYS = ("dice", "mae_direct", "mae_from_mask")
ROW_IDS = ("Baseline", "Exp A", "Exp B1", "Exp B2", "Exp C", "Exp D", "Exp E")


@dataclass(frozen=True)
class AblationConfig:
    profile: str = "toy"
    n_paired: int = 40
    n_weak: int = 80
    n_val: int = 12
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    seed: int = 0
    epochs_phase1: int = 40
    epochs_phase2: int = 20
    epochs_full: int = 60
    epochs_regression: int = 20
    lr_base: float = 1e-4
    lr_finetune: float = 1e-5
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    max_steps: Optional[int] = None


@dataclass
class EvalReport:
    rows: list[dict]
    reference: dict = field(default_factory=lambda: {"dice": REFERENCE_DICE, "mae_direct": REFERENCE_MAE})

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.rows]
        lines.append(json.dumps({"reference": self.reference}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        rows, ref = [], {}
        for line in text.splitlines():
            rec = json.loads(line)
            if "reference" in rec:
                ref = rec["reference"]
            else:
                rows.append(rec)
        return cls(rows, ref)

    def to_table(self) -> str:
        def fmt(v):
            return "N/A" if v is None else f"{v:.3f}"

        head = f"{'Exp ID':<9}{'Strategy':<13}{'Loss':<24}{'Dice':>7}{'MAE dir':>9}{'MAE mask':>10}{'ref Dice':>10}{'ref MAE':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r['exp_id']:<9}{r['strategy']:<13}{r['loss_setting']:<24}{fmt(r.get('dice')):>7}"
                f"{fmt(r.get('mae_direct')):>9}{fmt(r.get('mae_from_mask')):>10}"
                f"{fmt(REFERENCE_DICE.get(r['exp_id'])):>10}{fmt(REFERENCE_MAE.get(r['exp_id'])):>9}"
            )
        return "\n".join(lines)


def _row(exp_id, arch, strategy, loss, metrics, cfg, ckpt: Checkpoint, model, n_train,
         keep_dice=True, keep_mae=True):
    row = {
        "exp_id": exp_id,
        "architecture": arch,
        "strategy": strategy,
        "loss_setting": loss,
        "dice": metrics.get("dice") if keep_dice else None,
        "mae_direct": metrics.get("mae_direct") if keep_mae else None,
        "mae_from_mask": metrics.get("mae_from_mask") if keep_dice else None,
        "n_val": metrics["n_val"],
        "n_train": n_train,
        "seed": cfg.seed,
        "phase": ckpt.phase,
        "backbone_digest": model.group_digest("backbone"),
        "parent_digest": ckpt.parent_digest,
    }
    # metrics that do not apply to a row are left out, not written as null
    return {k: v for k, v in row.items() if v is not None or k not in METRIC_KEYS}


def run_ablation(cfg: AblationConfig = AblationConfig(), split: Optional[DatasetSplit] = None) -> EvalReport:
    """Train and evaluate the seven rows on one split with one seed."""
    if split is None:
        split = build_split(cfg.n_paired, cfg.n_weak, cfg.n_val, replace(cfg.phantom, seed=cfg.seed))
    if not split.val:
        raise ValueError("ablation needs validation samples")
    w = cfg.weights
    common = dict(seed=cfg.seed, batch_size=cfg.batch_size, max_steps=cfg.max_steps)
    p1 = PhaseConfig.phase1(epochs=cfg.epochs_phase1, learning_rate=cfg.lr_base,
                            weights=replace(w, beta=0.0), **common)
    p2 = PhaseConfig.phase2(epochs=cfg.epochs_phase2, learning_rate=cfg.lr_finetune,
                            weights=replace(w, alpha=0.0), **common)
    full = PhaseConfig.full_mtl(epochs=cfg.epochs_full, learning_rate=cfg.lr_base, weights=w, **common)
    reg_only = PhaseConfig.full_mtl(epochs=cfg.epochs_regression, learning_rate=cfg.lr_base,
                                    weights=replace(w, alpha=0.0, gamma=0.0), **common)
    mc = ModelConfig(profile=cfg.profile)
    n_p, n_all = len(split.paired), len(split.paired) + len(split.weak)
    rows = []

    def log_row(r):
        log.info("%s: dice=%s mae_direct=%s", r["exp_id"], r.get("dice"), r.get("mae_direct"))
        rows.append(r)

    m = build_model(replace(mc, attention=False, inject=False), cfg.seed)
    ck = train_phase1(split, m, p1)
    log_row(_row("Baseline", "Vanilla DeepLabV3+", "Single Task", "L_seg + L_cons",
                 evaluate(m, split.val), p1, ck, m, n_p, keep_mae=False))

    model_a = build_model(mc, cfg.seed)
    ck_a = train_phase1(split, model_a, p1)
    log_row(_row("Exp A", "Attention-gated", "Single Task", "L_seg + L_cons",
                 evaluate(model_a, split.val), p1, ck_a, model_a, n_p, keep_mae=False))

    for exp_id, use_weak, loss, n in (("Exp B1", False, "L_pre", n_p),
                                      ("Exp B2", True, "L_reg (L_pre + L_range)", n_all)):
        m = build_model(replace(mc, segmentation=False), cfg.seed)
        ck = train_full_mtl(split, m, reg_only, use_weak=use_weak)
        log_row(_row(exp_id, "Pure Regression", "Single Task", loss,
                     evaluate(m, split.val), reg_only, ck, m, n, keep_dice=False))

    m = build_model(mc, cfg.seed)
    ck = train_full_mtl(split, m, full)
    log_row(_row("Exp C", "Attention-gated", "Full MTL", "L_total", evaluate(m, split.val),
                 full, ck, m, n_all))

    # Exp D continues from the Exp A checkpoint: same lineage, frozen backbone
    ck_d = train_phase2(split, model_a, ck_a, p2)
    log_row(_row("Exp D", "Attention-gated", "Decoupled", "P1: L_seg + L_cons; P2: L_reg + L_cons",
                 evaluate(model_a, split.val), p2, ck_d, model_a, n_all))

    m = build_model(replace(mc, inject=False), cfg.seed)
    ck = train_full_mtl(split, m, full)
    log_row(_row("Exp E", "Attention-gated (No-Inject)", "Full MTL", "L_total",
                 evaluate(m, split.val), full, ck, m, n_all))
    return EvalReport(rows)
