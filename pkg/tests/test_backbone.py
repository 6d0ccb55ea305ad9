import numpy as np
import pytest
import torch

from drivexai.backbone import (
    MASPP,
    Backbone,
    BackboneConfig,
    MasppConfig,
    extract_taps,
    load_backbone_weights,
    resize_to,
    save_backbone_weights,
)


def test_desk_tap_shapes():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig()).eval()
    t2, t3, t4 = extract_taps(torch.randn(2, 3, 128, 256), bb)
    # strides 2,2,2,2: t2 at 1/4, t3 at 1/8, t4 at 1/16
    assert t2.shape == (2, 64, 32, 64)
    assert t3.shape == (2, 128, 16, 32)
    assert t4.shape == (2, 256, 8, 16)


def test_paper_profile_channels():
    assert BackboneConfig.profile("paper").tap_channels == (512, 1024, 2048)
    assert MasppConfig.profile("paper").projection_out == 512
    with pytest.raises(ValueError):
        BackboneConfig.profile("huge")


def test_backbone_errors():
    bb = Backbone()
    with pytest.raises(ValueError, match="empty batch"):
        bb(torch.zeros(0, 3, 64, 128))
    with pytest.raises(ValueError, match="multiple of 16"):
        bb(torch.zeros(1, 3, 60, 128))
    with pytest.raises(ValueError):
        BackboneConfig(tap_channels=(64, 64, 256))


def test_maspp_shapes_and_branch_count():
    torch.manual_seed(0)
    m = MASPP((64, 128, 256), MasppConfig()).eval()
    t2, t3, t4 = torch.randn(2, 64, 32, 64), torch.randn(2, 128, 16, 32), torch.randn(2, 256, 8, 16)
    branches = m.branches(t2, t3, t4)
    assert len(branches) == MASPP.n_branches == 7
    assert torch.cat(branches, 1).shape == (2, 224, 8, 16)
    assert m(t2, t3, t4).shape == (2, 64, 8, 16)


@pytest.mark.parametrize("size", [(64, 128), (96, 160), (48, 48)])
def test_output_matches_t4_grid(size):
    bb, m = Backbone().eval(), MASPP((64, 128, 256)).eval()
    taps = bb(torch.randn(1, 3, *size))
    assert m(*taps).shape[-2:] == taps[2].shape[-2:]


def test_zero_taps_give_projection_bias():
    torch.manual_seed(0)
    for train_mode in (False, True):
        m = MASPP((64, 128, 256)).train(train_mode)
        out = m(torch.zeros(2, 64, 16, 32), torch.zeros(2, 128, 8, 16), torch.zeros(2, 256, 4, 8))
        expected = m.project.bias.detach()[None, :, None, None].expand_as(out)
        assert torch.allclose(out, expected, atol=1e-7, rtol=0)


def test_large_dilation_degrades_gracefully():
    # rate 36 on a 2x4 map: every off-centre tap falls into padding
    m = MASPP((64, 128, 256)).eval()
    out = m(torch.randn(1, 64, 8, 16), torch.randn(1, 128, 4, 8), torch.randn(1, 256, 2, 4))
    assert out.shape == (1, 64, 2, 4) and torch.isfinite(out).all()


def test_resize_to():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    assert torch.equal(resize_to(x, (2, 2)), torch.nn.functional.avg_pool2d(x, 2))
    assert resize_to(x, (3, 3)).shape[-2:] == (3, 3)
    assert resize_to(x, (4, 4)) is x


def test_translation_consistency_interior():
    torch.manual_seed(0)
    cfg = MasppConfig(branch_channels=3, projection_out=4)
    m = MASPP((2, 3, 4), cfg).double().eval()
    h = w = 80
    t4 = torch.randn(1, 4, h, w, dtype=torch.float64)
    t3 = torch.randn(1, 3, 2 * h, 2 * w, dtype=torch.float64)
    t2 = torch.randn(1, 2, 4 * h, 4 * w, dtype=torch.float64)
    out = m(t2, t3, t4)
    shifted = m(torch.roll(t2, 4, dims=3), torch.roll(t3, 2, dims=3), torch.roll(t4, 1, dims=3))
    lo, hi = 37, w - 37  # beyond the widest dilation (36) from either border
    assert torch.allclose(torch.roll(out, 1, dims=3)[..., lo:hi, lo:hi], shifted[..., lo:hi, lo:hi], atol=1e-10)


def test_maspp_gradcheck():
    torch.manual_seed(0)
    m = MASPP((4, 6, 8), MasppConfig(branch_channels=3, projection_out=5)).double().eval()
    taps = (
        torch.randn(1, 4, 24, 24, dtype=torch.float64, requires_grad=True),
        torch.randn(1, 6, 12, 12, dtype=torch.float64, requires_grad=True),
        torch.randn(1, 8, 6, 6, dtype=torch.float64, requires_grad=True),
    )
    assert torch.autograd.gradcheck(m, taps, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_weight_import_round_trip(tmp_path):
    torch.manual_seed(0)
    src, dst = Backbone(), Backbone()
    path = tmp_path / "bb.npz"
    save_backbone_weights(src, path)
    assert load_backbone_weights(dst, path) == []
    for (k, a), b in zip(src.state_dict().items(), dst.state_dict().values()):
        assert torch.equal(a, b), k


def test_weight_import_name_map_and_shape_check(tmp_path):
    src = Backbone()
    arrays = {f"external.{k}": v.numpy() for k, v in src.state_dict().items()}
    arrays["__format_version__"] = np.array(1)
    path = tmp_path / "ext.npz"
    np.savez(path, **arrays)
    name_map = {f"external.{k}": k for k in src.state_dict()}
    load_backbone_weights(Backbone(), path, name_map)
    with pytest.raises(ValueError, match="weight names"):
        load_backbone_weights(Backbone(), path)
    small = Backbone(BackboneConfig(tap_channels=(16, 32, 64)))
    with pytest.raises(ValueError, match="shape mismatch"):
        load_backbone_weights(small, path, name_map)
