import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fraggrade.grading import Grade
from fraggrade.losses import (
    LossWeights, batch_reg_loss, consistency_loss, precise_loss, range_loss, reg_loss, seg_loss,
    total_loss,
)


def sig(z):
    return 1 / (1 + math.exp(-z))


def oracle_parts(logits, gt, gamma=2.0, a=0.25, smooth=1.0):
    n = len(logits)
    bce = focal = inter = psum = gsum = 0.0
    for z, y in zip(logits, gt):
        p = sig(z)
        bce += -(y * math.log(p) + (1 - y) * math.log(1 - p))
        if y:
            focal += -a * (1 - p) ** gamma * math.log(p)
        else:
            focal += -(1 - a) * p ** gamma * math.log(1 - p)
        inter += p * y
        psum += p
        gsum += y
    return bce / n, 1 - (2 * inter + smooth) / (psum + gsum + smooth), focal / n


def test_seg_components_match_oracle():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(0, 2, (1, 1, 4, 4)))
    gt = torch.tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(float))
    total, parts = seg_loss(logits, gt, parts=True)
    bce, dice, focal = oracle_parts(logits.ravel().tolist(), gt.ravel().tolist())
    assert abs(parts["bce"].item() - bce) < 1e-9
    assert abs(parts["dice"].item() - dice) < 1e-9
    assert abs(parts["focal"].item() - focal) < 1e-9
    assert abs(total.item() - (bce + dice + focal)) < 1e-9


def test_seg_loss_perfect_prediction_limit():
    gt = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    gt[..., 2:6, 2:6] = 1
    logits = (gt * 2 - 1) * 60
    assert seg_loss(logits, gt).item() < 1e-6


def test_seg_loss_rejects_bad_gt():
    with pytest.raises(ValueError):
        seg_loss(torch.zeros(1, 1, 2, 2), torch.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ValueError):
        seg_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 2))


def test_soft_dice_approaches_hard_dice_when_saturated():
    # the smoothing constant contributes ~1/(|P|+|G|), so use masks of a few thousand pixels
    rng = np.random.default_rng(1)
    gt = rng.random((1, 1, 64, 64)) > 0.5
    pred = gt.copy()
    pred[0, 0, :8] = ~pred[0, 0, :8]
    logits = torch.tensor(np.where(pred, 12.0, -12.0))
    hard = 2 * (pred & gt).sum() / (pred.sum() + gt.sum())
    _, parts = seg_loss(logits, torch.tensor(gt.astype(float)), parts=True)
    assert abs(parts["dice"].item() - (1 - hard)) < 1e-3


@pytest.mark.parametrize("grade,y,expected", [
    ("A", 0.05, 0.0), ("C", 0.60, 0.10), ("D", 0.40, 0.10), ("B", 0.05, 0.05), ("B", 0.30, 0.05),
])
def test_range_examples(grade, y, expected):
    v = range_loss(torch.tensor(y, dtype=torch.float64), Grade(grade)).item()
    assert abs(v - expected) < 1e-12


def test_range_vectorised_and_reg_dispatch():
    y = torch.tensor([0.05, 0.6, 0.3], dtype=torch.float64)
    v = range_loss(y, ["A", "C", "D"])
    assert torch.allclose(v, torch.tensor([0.0, 0.1, 0.2], dtype=torch.float64))
    assert reg_loss(torch.tensor(0.3), ratio=0.25).item() == pytest.approx(0.05)
    assert reg_loss(torch.tensor(0.3), grade="B").item() == pytest.approx(0.05)
    with pytest.raises(ValueError):
        reg_loss(torch.tensor(0.3))


def test_batch_reg_loss_mixes_paired_and_weak():
    y = torch.tensor([0.3, 0.3], dtype=torch.float64)
    v = batch_reg_loss(y, [0.2, None], [Grade.C, Grade.B])
    assert v.item() == pytest.approx((0.1 + 0.05) / 2)


@given(st.floats(0, 1), st.sampled_from(list(Grade)))
def test_range_zero_set_is_interval(y, g):
    from fraggrade.grading import grade_to_interval
    iv = grade_to_interval(g)
    v = range_loss(torch.tensor(y, dtype=torch.float64), g).item()
    assert v >= 0
    assert (v == 0) == (iv.y_min <= y <= iv.y_max)


def test_range_gradient_signs():
    for y, s in ((0.02, 1.0), (0.3, 0.0), (0.9, -1.0)):
        t = torch.tensor(y, dtype=torch.float64, requires_grad=True)
        range_loss(t, "C").backward()
        assert t.grad.item() == -s


def test_consistency_examples():
    logits = torch.full((10, 10), -40.0, dtype=torch.float64)
    logits[:5, :5] = 40.0
    assert consistency_loss(torch.tensor(0.25, dtype=torch.float64), logits, 100).item() < 1e-12
    zero = torch.full((10, 10), -1e3, dtype=torch.float64)
    assert consistency_loss(torch.tensor(0.0, dtype=torch.float64), zero, 100).item() == 0.0
    # soft mask summing to 25 over a 100-pixel embryo -> 0.25; |0.30 - 0.25| = 0.05
    z = math.log(0.25 / 0.75)
    soft = torch.full((10, 10), z, dtype=torch.float64)
    assert abs(soft.sigmoid().sum().item() - 25.0) < 1e-9
    v = consistency_loss(torch.tensor(0.30, dtype=torch.float64), soft, 100).item()
    assert abs(v - 0.05) < 1e-12


def test_consistency_batch_and_errors():
    logits = torch.zeros(2, 4, 4, dtype=torch.float64)  # soft sum 8 each
    v = consistency_loss(torch.tensor([0.5, 0.1], dtype=torch.float64), logits, torch.tensor([16.0, 8.0]))
    assert v.item() == pytest.approx((0.0 + 0.9) / 2)
    with pytest.raises(ValueError):
        consistency_loss(torch.tensor(0.1), torch.zeros(4, 4), 0)


def test_total_loss_weighted_sum_and_laziness():
    w = LossWeights(alpha=2.0, beta=0.0, gamma=0.5)

    def boom():
        raise AssertionError("regression part must not be evaluated when beta is 0")

    v = total_loss({"seg": torch.tensor(1.0), "reg": boom, "cons": lambda: torch.tensor(4.0)}, w)
    assert v.item() == 4.0
    zero = LossWeights(alpha=0, beta=0, gamma=0)
    assert total_loss({"seg": torch.tensor(3.0)}, zero).item() == 0.0
    with pytest.raises(ValueError):
        total_loss({"seg": torch.tensor(float("nan"))})


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
    with pytest.raises(ValueError):
        LossWeights(dice_smooth=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_all_components_non_negative(seed):
    rng = np.random.default_rng(seed)
    logits = torch.tensor(rng.normal(0, 5, (2, 1, 6, 6)))
    gt = torch.tensor((rng.random((2, 1, 6, 6)) > 0.5).astype(float))
    _, parts = seg_loss(logits, gt, parts=True)
    assert all(v.item() >= 0 for v in parts.values())
    y = torch.tensor(rng.random(2))
    assert consistency_loss(y, logits[:, 0], torch.tensor([20.0, 30.0])).item() >= 0
    assert (precise_loss(y, 0.3) >= 0).all()
