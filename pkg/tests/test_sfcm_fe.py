import pytest
import torch
import torch.nn as nn

from eled.sfcm_fe import SFCMFE, FusionError, SFCMFELevel, default_sigma, run_pyramid, sfcm_fe_level

C = 8
D = torch.float64


def feats(seed, n=1, h=16, w=16, c=C):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, c << s, h >> s, w >> s, generator=g, dtype=D) for s in range(3)]


def one_hot_predictor(level):
    """Make the kernel predictor emit a centre-tap delta at every pixel."""
    last = level.kernel_predictor.body[-1]
    nn.init.zeros_(last.weight)
    with torch.no_grad():
        last.bias.fill_(-1e4)
        last.bias[level.kf**2 // 2] = 1e4


def checkerboard(h, w):
    y, x = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return (((x + y) % 2) * 2 - 1).to(D)[None, None]


def test_shape_law_middle_scale():
    torch.manual_seed(0)
    level = SFCMFELevel(2 * C, scale=1).to(D)
    a, e, prev = feats(1)[1], feats(2)[1], feats(3)[2]
    assert level(a, e, prev).shape == (1, 2 * C, 8, 8)
    assert sfcm_fe_level(level, a, e, prev).shape == a.shape


def test_degenerate_composition():
    torch.manual_seed(0)
    level = SFCMFELevel(C, scale=2, n_cab=0, sigma=1e9).to(D)
    one_hot_predictor(level)
    for conv in (level.fuse.conv_a, level.fuse.conv_b):
        nn.init.zeros_(conv.weight)
        nn.init.zeros_(conv.bias)
    a, e = feats(4, c=C)[0], feats(5, c=C)[0]
    m = level.merged(a, e)
    xa, xb = level.split_a(m), level.split_b(m)
    torch.testing.assert_close(level.branch_a(xa), 2 * xa, atol=1e-9, rtol=0)
    torch.testing.assert_close(level(a, e), 0.5 * (2 * xa + xb), atol=1e-9, rtol=0)


def test_checkerboard_attenuated():
    level = SFCMFELevel(1, scale=2).to(D)
    h = w = 32
    cb = checkerboard(h, w)
    dc = torch.ones_like(cb)
    mask = level.mask_for(cb, sigma=min(h, w) / 8)
    out_cb = level.spectral.filtered(cb, mask).abs().max()
    out_dc = level.spectral.filtered(dc, mask).abs().max()
    assert out_dc > 10 * out_cb
    torch.testing.assert_close(out_dc, torch.tensor(1.0, dtype=D))


def test_attenuation_monotone_in_sigma():
    level = SFCMFELevel(1, scale=2).to(D)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 1, 24, 24, generator=g, dtype=D)
    energy = [level.spectral.filtered(x, level.mask_for(x, s)).pow(2).sum().item() for s in (1, 2, 4, 8, 16)]
    assert all(a < b for a, b in zip(energy, energy[1:]))
    assert energy[-1] <= x.pow(2).sum().item()


def test_default_sigma():
    assert default_sigma(64, 32) == 16.0
    assert SFCMFELevel(C, 0).resolve_sigma(64, 48) == 16.0
    assert SFCMFELevel(C, 0, sigma_divisor=8).resolve_sigma(64, 48) == 8.0


def test_errors():
    level = SFCMFELevel(C, scale=0).to(D)
    a, e = feats(0)[0], feats(1)[0]
    with pytest.raises(FusionError):
        level(a, e)
    with pytest.raises(FusionError):
        level(a, e[..., :8])
    with pytest.raises(FusionError):
        level.mask_for(a, sigma=0.0)
    with pytest.raises(FusionError):
        SFCMFELevel(C, 0, sigma=-1.0).resolve_sigma(4, 4)
    coarse = SFCMFELevel(4 * C, scale=2).to(D)
    with pytest.raises(FusionError):
        coarse(feats(0)[2], feats(1)[2], feats(2)[2])
    with pytest.raises(FusionError):
        SFCMFE(C, mode="bogus")
    with pytest.raises(FusionError):
        SFCMFE(C).to(D)(feats(0)[:2], feats(1)[:2])


def test_pyramid_and_gradients():
    torch.manual_seed(0)
    module = SFCMFE(C).to(D)
    a, e = feats(0), feats(1)
    for t in a + e:
        t.requires_grad_(True)
    out = run_pyramid(module, a, e)
    assert len(out) == 3
    assert [tuple(o.shape) for o in out] == [tuple(t.shape) for t in a]
    sum(o.sum() for o in out).backward()
    for t in a + e:
        assert t.grad is not None and t.grad.abs().sum() > 0


def test_coarse_result_feeds_fine_scale():
    torch.manual_seed(0)
    module = SFCMFE(C).to(D)
    a, e = feats(0), feats(1)
    base = module(a, e)
    a2 = list(a)
    a2[2] = a[2] + 1.0
    moved = module(a2, e)
    assert not torch.allclose(base[0], moved[0])


@pytest.mark.parametrize("mode", ["conv1x1", "efnet", "refid"])
def test_alternative_fusion_modes(mode):
    torch.manual_seed(0)
    module = SFCMFE(C, mode=mode).to(D)
    a, e = feats(0), feats(1)
    out = module(a, e)
    assert [tuple(o.shape) for o in out] == [tuple(t.shape) for t in a]
    with pytest.raises(FusionError):
        module.levels[0](a[0], e[1])


def test_ablation_switches_change_params():
    full = sum(p.numel() for p in SFCMFE(C).parameters())
    for kw in ({"use_lpf": False}, {"use_sa": False}, {"use_cab": False}):
        assert sum(p.numel() for p in SFCMFE(C, **kw).parameters()) < full
