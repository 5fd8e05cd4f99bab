"""Feature extractor, conditioning branch, and alignment net contracts."""

import numpy as np
import pytest
import torch

from lightblend.conditioning import (
    AlignmentNet,
    ConditionedDenoiser,
    ConditioningBranch,
    ExtractorConfig,
    FeatureExtractor,
    feature_norm_map,
)
from lightblend.diffusion import DenoiserConfig, UNet

torch.set_num_threads(1)


def small_config(size=32):
    return DenoiserConfig(
        size=size, base_width=8, channel_mults=(1, 1, 2, 2), emb_dim=16, feature_channels=12
    )


def test_extractor_shape_and_determinism():
    cfg = ExtractorConfig(size=32, channels=12, hidden=8)
    torch.manual_seed(0)
    net = FeatureExtractor(cfg)
    img = torch.rand((2, 3, 32, 32), generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        f1 = net(img)
        f2 = net(img)
    assert f1.shape == (2, 12, 4, 4)
    assert torch.equal(f1, f2)
    assert torch.isfinite(f1).all()
    with pytest.raises(ValueError, match="expected"):
        net(torch.rand((2, 3, 16, 16)))
    with pytest.raises(ValueError):
        ExtractorConfig(size=30, channels=8, hidden=8)


def test_extractor_has_exactly_four_convs():
    net = FeatureExtractor(ExtractorConfig(size=32, channels=12, hidden=8))
    convs = [m for m in net.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 4
    assert [c.stride[0] for c in convs] == [2, 2, 2, 1]


def branch_setup(seed=0):
    cfg = small_config()
    torch.manual_seed(seed)
    unet = UNet(cfg)
    branch = ConditioningBranch(cfg)
    gen = torch.Generator().manual_seed(seed + 1)
    # perturb the denoiser off its zero-init output so the identity check
    # below is not trivially satisfied by an all-zero prediction
    with torch.no_grad():
        for p in unet.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen))
    x_t = torch.randn((2, 3, 32, 32), generator=gen)
    x_a = torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1
    m = (torch.rand((2, 1, 32, 32), generator=gen) > 0.5).float()
    f = torch.randn((2, cfg.feature_channels, cfg.feature_size, cfg.feature_size), generator=gen)
    t = torch.tensor([3, 7])
    return cfg, unet, branch, x_t, x_a, m, f, t


def test_branch_residual_shapes_match_levels():
    cfg, _, branch, x_t, _, _, f, t = branch_setup()
    residuals = branch(f, x_t, t)
    assert len(residuals) == cfg.levels
    size = cfg.size
    for ch, r in zip(cfg.level_channels, residuals):
        assert r.shape == (2, ch, size, size)
        size //= 2


def test_fresh_branch_is_bitwise_inert():
    # zero-initialized per-level projections: conditioning must not move
    # a single bit of the denoiser output until the branch trains
    _, unet, branch, x_t, x_a, m, f, t = branch_setup()
    with torch.no_grad():
        plain = unet(x_t, t, x_a, m)
        conditioned = ConditionedDenoiser(unet, branch)(x_t, t, x_a, m, f)
    assert torch.equal(plain, conditioned)


def test_trained_branch_residuals_change_output():
    _, unet, branch, x_t, x_a, m, f, t = branch_setup()
    gen = torch.Generator().manual_seed(99)
    with torch.no_grad():
        for proj in branch.out_projs:
            proj.weight.add_(0.1 * torch.randn(proj.weight.shape, generator=gen))
        plain = unet(x_t, t, x_a, m)
        conditioned = ConditionedDenoiser(unet, branch)(x_t, t, x_a, m, f)
    assert not torch.equal(plain, conditioned)


def test_branch_output_depends_on_feature():
    _, unet, branch, x_t, x_a, m, f, t = branch_setup()
    gen = torch.Generator().manual_seed(100)
    with torch.no_grad():
        for proj in branch.out_projs:
            proj.weight.add_(0.1 * torch.randn(proj.weight.shape, generator=gen))
        a = branch(f, x_t, t)
        b = branch(f + 1.0, x_t, t)
    assert all(not torch.equal(x, y) for x, y in zip(a, b))


def test_branch_rejects_wrong_feature_shape():
    cfg, _, branch, x_t, _, _, _, t = branch_setup()
    bad = torch.randn((2, cfg.feature_channels, 2, 2))
    with pytest.raises(ValueError, match="expected feature"):
        branch(bad, x_t, t)


def test_alignment_identity_at_init():
    torch.manual_seed(0)
    net = AlignmentNet(12)
    f = torch.randn((3, 12, 4, 4), generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        out = net(f)
    assert torch.equal(out, f)


def test_alignment_preserves_shape_after_training_step():
    torch.manual_seed(0)
    net = AlignmentNet(12)
    f = torch.randn((3, 12, 4, 4), generator=torch.Generator().manual_seed(2))
    target = torch.randn_like(f)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    loss = (net(f) - target).abs().mean()
    loss.backward()
    opt.step()
    with torch.no_grad():
        out = net(f)
    assert out.shape == f.shape
    assert not torch.equal(out, f)
    with pytest.raises(ValueError, match="feature channels"):
        net(torch.randn((1, 5, 4, 4)))


def test_feature_norm_map_scaling():
    f = np.zeros((4, 3, 3), dtype=np.float32)
    f[:, 1, 1] = 3.0  # single hot cell, L2 norm 6
    out = feature_norm_map(f)
    assert out.shape == (3, 3)
    assert out[1, 1] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)  # everything else is zero
    assert np.array_equal(feature_norm_map(np.zeros((4, 3, 3))), np.zeros((3, 3)))
    batched = feature_norm_map(torch.ones((2, 4, 3, 3)))
    assert batched.shape == (2, 3, 3)
    assert np.allclose(batched, 1.0)
