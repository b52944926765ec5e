import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fraggrade.data import (
    ImageSample, PhantomConfig, apply_pad_record, build_split, estimate_embryo_mask,
    generate_phantom, load_split, pad_record_for, preprocess, preprocess_sample, save_split,
)
from fraggrade.grading import Grade


def brute_ratio(frag, emb):
    f = e = 0
    for a, b in zip(frag.ravel().tolist(), emb.ravel().tolist()):
        e += b
        f += a and b
    return f / e


def test_zero_ratio_phantom():
    s = generate_phantom(PhantomConfig(seed=1), 0.0)
    assert not s.fragment_mask.any()
    assert s.ratio == 0.0 and s.grade == Grade.A


def test_phantom_ratio_030():
    s = generate_phantom(PhantomConfig(seed=2), 0.30)
    r = brute_ratio(s.fragment_mask, s.embryo_mask)
    assert 0.28 <= r <= 0.32
    assert r == s.ratio
    assert s.grade == Grade.C
    s.validate()


@pytest.mark.parametrize("target", [0.02, 0.12, 0.45, 0.7, 0.95, 1.0])
def test_phantom_hits_target(target):
    s = generate_phantom(PhantomConfig(seed=5), target)
    assert abs(s.ratio - target) <= 0.02
    assert not (s.fragment_mask & ~s.embryo_mask).any()
    assert s.image.min() >= 0 and s.image.max() <= 1


def test_phantom_deterministic():
    a = generate_phantom(PhantomConfig(seed=9), 0.4)
    b = generate_phantom(PhantomConfig(seed=9), 0.4)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.fragment_mask.tobytes() == b.fragment_mask.tobytes()


def test_phantom_rejects_bad_target():
    with pytest.raises(ValueError):
        generate_phantom(PhantomConfig(), 1.5)


def test_phantom_config_invariants():
    with pytest.raises(ValueError):
        PhantomConfig(image_size=32)
    with pytest.raises(ValueError):
        PhantomConfig(noise_std=-1)
    with pytest.raises(ValueError):
        PhantomConfig(fragment_count_range=(5, 2))


def test_split_counts_and_weak_stripping():
    split = build_split(10, 20, 5, PhantomConfig(image_size=96, seed=3))
    assert (len(split.paired), len(split.weak), len(split.val)) == (10, 20, 5)
    for s in split.weak:
        assert s.fragment_mask is None and s.embryo_mask is None and s.ratio is None
        assert s.grade is not None
    for s in split.paired + split.val:
        assert brute_ratio(s.fragment_mask, s.embryo_mask) == s.ratio


def test_split_covers_grades():
    split = build_split(40, 0, 0, PhantomConfig(image_size=96, seed=4))
    assert {s.grade for s in split.paired} == set(Grade)


def test_split_degenerate():
    split = build_split(0, 5, 0, PhantomConfig(image_size=96))
    assert split.paired == [] and len(split.weak) == 5


def test_split_parallel_equals_sequential():
    cfg = PhantomConfig(image_size=80, seed=11)
    a = build_split(4, 4, 2, cfg)
    b = build_split(4, 4, 2, cfg, workers=3)
    for x, y in zip(a.paired + a.weak + a.val, b.paired + b.weak + b.val):
        assert x.id == y.id and x.image.tobytes() == y.image.tobytes()


@pytest.mark.slow
def test_split_clinical_sizes():
    split = build_split(318, 1549, 50, PhantomConfig(image_size=64, seed=0))
    assert (len(split.paired), len(split.weak), len(split.val)) == (318, 1549, 50)


def test_preprocess_identity_at_target():
    img = np.random.default_rng(0).random((299, 299)).astype(np.float32)
    out, rec = preprocess(img)
    assert np.array_equal(out, img)
    assert (rec.pad_top, rec.pad_bottom, rec.pad_left, rec.pad_right) == (0, 0, 0, 0)


def test_preprocess_400x200():
    # 200 * 299 / 400 = 149.5 -> 149; 299 - 149 = 150 -> 75 / 75
    img = np.ones((400, 200), np.float32)
    out, rec = preprocess(img)
    assert out.shape == (299, 299)
    assert rec.content_shape == (299, 149)
    assert (rec.pad_left, rec.pad_right) == (75, 75)
    assert (rec.pad_top, rec.pad_bottom) == (0, 0)
    assert np.all(out[:, :75] == 0) and np.all(out[:, 75 + 149:] == 0)
    assert np.allclose(out[:, 75:75 + 149], 1.0)


def test_preprocess_square_upscale():
    out, rec = preprocess(np.ones((100, 100), np.float32))
    assert rec.content_shape == (299, 299) and out.min() > 0


def test_odd_padding_goes_bottom_right():
    # 299 - 100 = 199 columns of padding -> 99 left, 100 right
    rec = pad_record_for((299, 100))
    assert rec.content_shape == (299, 100)
    assert (rec.pad_left, rec.pad_right) == (99, 100)


def blob_masks(h, w, rng):
    yy, xx = np.mgrid[:h, :w]
    emb = ((yy - h / 2) / (0.4 * h)) ** 2 + ((xx - w / 2) / (0.4 * w)) ** 2 <= 1
    blobs = np.zeros_like(emb)
    for _ in range(5):
        cy, cx = rng.random(2) * [h, w]
        r = rng.uniform(0.05, 0.2) * min(h, w)
        blobs |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return blobs & emb, emb


@settings(max_examples=25, deadline=None)
@given(st.integers(48, 900), st.integers(48, 900), st.integers(0, 2**31))
def test_preprocess_paired_transform(h, w, seed):
    frag, emb = blob_masks(h, w, np.random.default_rng(seed))
    s = ImageSample("x", emb.astype(np.float32), frag, emb, None, brute_ratio(frag, emb))
    p = preprocess_sample(s)
    assert p.image.shape == (299, 299)
    assert not (p.fragment_mask & ~p.embryo_mask).any()
    assert abs(p.ratio - s.ratio) <= 0.01


def test_pad_record_replays_on_masks():
    rng = np.random.default_rng(0)
    m = rng.random((123, 77)) > 0.5
    rec = pad_record_for(m.shape)
    out = apply_pad_record(m, rec, nearest=True)
    assert out.dtype == bool and out.shape == (299, 299)


def test_embryo_estimate_matches_truth():
    s = generate_phantom(PhantomConfig(seed=21), 0.35)
    est = estimate_embryo_mask(s.image)
    iou = (est & s.embryo_mask).sum() / (est | s.embryo_mask).sum()
    assert iou > 0.95


def test_save_load_round_trip(tmp_path):
    split = build_split(3, 2, 2, PhantomConfig(image_size=72, seed=5))
    save_split(split, tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 7
    back = load_split(tmp_path)
    assert [s.id for s in back.paired] == [s.id for s in split.paired]
    for a, b in zip(split.paired, back.paired):
        assert np.array_equal(a.fragment_mask, b.fragment_mask)
        assert a.ratio == b.ratio and a.grade == b.grade
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6
    assert all(s.fragment_mask is None for s in back.weak)
