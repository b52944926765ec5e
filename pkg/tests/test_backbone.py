import pytest
import torch
from hypothesis import given, settings, strategies as st

from fraggrade.backbone import Backbone, BackboneConfig


def out_size(n, k, s, p, d=1):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def pyramid_sizes(n):
    """Trace the stem, pool and stage-2 stride through the conv size formula."""
    n = out_size(n, 7, 2, 3)  # conv1
    n = out_size(n, 3, 2, 1)  # maxpool
    f1 = n
    n = out_size(n, 3, 2, 1)  # stage-2 3x3 stride 2
    return f1, n


def test_size_oracle_matches_hand_arithmetic():
    assert pyramid_sizes(299) == (75, 38)
    assert pyramid_sizes(256) == (64, 32)


@pytest.mark.parametrize("size", [299, 256])
def test_toy_shapes(size):
    bb = Backbone(BackboneConfig.toy()).eval()
    with torch.no_grad():
        pyr = bb(torch.zeros(1, 3, size, size))
    s1, s3 = pyramid_sizes(size)
    assert pyr.f1.shape == (1, 32, s1, s1)
    assert pyr.f3.shape == (1, 128, s3, s3)
    assert pyr.f4.shape == (1, 256, s3, s3)


@pytest.mark.slow
def test_full_profile_shapes():
    bb = Backbone(BackboneConfig.full()).eval()
    with torch.no_grad():
        pyr = bb(torch.zeros(1, 3, 299, 299))
    assert pyr.f1.shape[1:] == (256, 75, 75)
    assert pyr.f3.shape[1:] == (1024, 38, 38)
    assert pyr.f4.shape[1:] == (2048, 38, 38)


def test_toy_channels_echo_config():
    cfg = BackboneConfig.toy()
    assert (cfg.stage_channels[0], cfg.stage_channels[2], cfg.stage_channels[3]) == (32, 128, 256)


@settings(max_examples=8, deadline=None)
@given(st.integers(32, 140), st.integers(32, 140))
def test_stride_invariant(h, w):
    bb = Backbone(BackboneConfig.toy()).eval()
    with torch.no_grad():
        pyr = bb(torch.rand(1, 3, h, w))
    assert pyr.f3.shape[-2:] == pyr.f4.shape[-2:]
    assert pyr.f1.shape[-2:] == (pyramid_sizes(h)[0], pyramid_sizes(w)[0])
    assert pyr.f3.shape[-2:] == (pyramid_sizes(h)[1], pyramid_sizes(w)[1])


def test_rejects_bad_input():
    bb = Backbone(BackboneConfig.toy())
    with pytest.raises(ValueError):
        bb(torch.zeros(1, 1, 64, 64))
    with pytest.raises(ValueError):
        bb(torch.zeros(1, 3, 31, 64))


def _support(bb, size=128):
    torch.manual_seed(3)
    x = torch.rand(1, 3, size, size, dtype=torch.float64)
    x2 = x.clone()
    x2[..., size // 2, size // 2] += 1.0
    with torch.no_grad():
        d = (bb(x2).f4 - bb(x).f4).abs().amax(dim=1)[0]
    return int((d > 1e-12).sum())


def test_dilation_widens_receptive_field():
    torch.manual_seed(0)
    dilated = Backbone(BackboneConfig.toy()).double().eval()
    plain = Backbone(BackboneConfig(dilation_rates=(1, 1))).double().eval()
    plain.load_state_dict(dilated.state_dict())  # same weights, only the dilation differs
    assert _support(dilated) > _support(plain)


def test_loads_named_arrays_and_skips_fc():
    src = Backbone(BackboneConfig.toy())
    arrays = {k: v.numpy() for k, v in src.state_dict().items()}
    arrays["fc.weight"] = torch.zeros(3, 3).numpy()
    dst = Backbone(BackboneConfig.toy())
    dst.load_named_arrays(arrays)
    for k, v in dst.state_dict().items():
        assert torch.equal(v, src.state_dict()[k])


def test_load_rejects_wrong_shape():
    bb = Backbone(BackboneConfig.toy())
    arrays = {k: v.numpy() for k, v in bb.state_dict().items()}
    arrays["conv1.weight"] = torch.zeros(1, 3, 7, 7).numpy()
    with pytest.raises(ValueError):
        bb.load_named_arrays(arrays)


def test_parameter_names_follow_resnet_layout():
    names = set(Backbone(BackboneConfig.full()).state_dict())
    for n in ("conv1.weight", "bn1.running_mean", "layer1.0.conv1.weight",
              "layer1.0.downsample.0.weight", "layer4.2.bn3.bias", "layer3.5.conv2.weight"):
        assert n in names
