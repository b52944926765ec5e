import numpy as np
import pytest
from hypothesis import given, strategies as st

from fraggrade.grading import Grade, grade_to_interval, mask_to_ratio, ratio_to_grade


@pytest.mark.parametrize("g,lo,hi", [("A", 0.0, 0.10), ("B", 0.10, 0.25), ("C", 0.25, 0.50), ("D", 0.50, 1.0)])
def test_grade_intervals(g, lo, hi):
    iv = grade_to_interval(Grade(g))
    assert (iv.y_min, iv.y_max) == (lo, hi)


def test_intervals_tile_unit_interval():
    ivs = [grade_to_interval(g) for g in Grade]
    assert ivs[0].y_min == 0.0 and ivs[-1].y_max == 1.0
    for a, b in zip(ivs, ivs[1:]):
        assert a.y_max == b.y_min


@pytest.mark.parametrize("r,g", [(0.0, "A"), (0.05, "A"), (0.10, "B"), (0.2499, "B"), (0.25, "C"),
                                 (0.50, "D"), (0.75, "D"), (1.0, "D")])
def test_ratio_to_grade(r, g):
    assert ratio_to_grade(r) == Grade(g)


@pytest.mark.parametrize("r", [-0.01, 1.01, float("nan")])
def test_ratio_out_of_range(r):
    with pytest.raises(ValueError):
        ratio_to_grade(r)


@given(st.floats(0, 1))
def test_round_trip_contains(r):
    assert r in grade_to_interval(ratio_to_grade(r))


@given(st.floats(0, 1), st.floats(0, 1))
def test_monotone(r1, r2):
    lo, hi = sorted((r1, r2))
    assert ratio_to_grade(lo) <= ratio_to_grade(hi)


def test_mask_to_ratio_examples():
    emb = np.zeros((20, 20), bool)
    emb[5:15, 5:15] = True  # 100 pixels
    assert mask_to_ratio(np.zeros_like(emb), emb) == 0.0
    assert mask_to_ratio(emb, emb) == 1.0
    frag = np.zeros_like(emb)
    frag[5:10, 5:10] = True  # 25 pixels inside
    count_f = sum(1 for i in range(20) for j in range(20) if frag[i, j] and emb[i, j])
    count_e = sum(1 for i in range(20) for j in range(20) if emb[i, j])
    assert count_f == 25 and count_e == 100
    assert mask_to_ratio(frag, emb) == 0.25


def test_mask_to_ratio_errors():
    with pytest.raises(ValueError):
        mask_to_ratio(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        mask_to_ratio(np.zeros((4, 4)), np.ones((4, 5)))


@given(st.integers(0, 2**32 - 1))
def test_mask_ratio_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    emb = rng.random((8, 8)) < 0.7
    emb[0, 0] = True
    frag = (rng.random((8, 8)) < 0.3) & emb
    perm = rng.permutation(64)
    r1 = mask_to_ratio(frag, emb)
    r2 = mask_to_ratio(frag.reshape(-1)[perm].reshape(8, 8), emb.reshape(-1)[perm].reshape(8, 8))
    assert r1 == r2
