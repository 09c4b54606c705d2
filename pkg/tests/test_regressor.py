import math

import pytest
import torch

from gsrl.errors import ContractViolation, ShapeError
from gsrl.regressor import (
    GaussianRegressor,
    PropertyMaps,
    activate_opacity,
    activate_rotation,
    activate_scale,
    assemble_cloud,
)


def _inputs(B=1, H=64, W=64, C=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    depth = 1.5 + 4 * torch.rand(B, H, W, generator=g)
    feat = torch.randn(B, H // 4, W // 4, C, generator=g)
    img = torch.rand(B, H, W, 3, generator=g)
    return depth, feat, img


def test_fused_shape_full_resolution():
    torch.manual_seed(0)
    net = GaussianRegressor()
    fused = net.fuse_features(*_inputs(), d_max=2.0)
    assert fused.features.shape == (1, 64, 64, 64)
    assert fused.inputs == ("depth", "features", "image")
    assert torch.isfinite(fused.features).all()


def test_without_feature_input_uses_image_twice():
    torch.manual_seed(0)
    net = GaussianRegressor(use_feature_input=False)
    assert net.enc0[0].in_channels == 3 + 1 + 3
    assert GaussianRegressor().enc0[0].in_channels == 1 + 32 + 3
    depth, feat, img = _inputs()
    fused = net.fuse_features(depth, feat, img, 2.0)
    assert fused.inputs == ("depth", "image", "image")
    # features are ignored entirely
    other = net.fuse_features(depth, torch.zeros_like(feat), img, 2.0)
    assert torch.equal(fused.features, other.features)


def test_fusion_deterministic():
    torch.manual_seed(0)
    net = GaussianRegressor()
    x = _inputs()
    assert torch.equal(net(*x, 2.0).scale, net(*x, 2.0).scale)


def test_fusion_shape_mismatch():
    net = GaussianRegressor()
    depth, feat, img = _inputs()
    with pytest.raises(ShapeError):
        net.fuse_features(depth[:, :32], feat, img, 2.0)


def test_property_maps_resolution_and_ranges():
    torch.manual_seed(0)
    net = GaussianRegressor()
    props = net(*_inputs(B=2), d_max=2.0)
    assert props.rotation.shape == (2, 64, 64, 4)
    assert props.scale.shape == (2, 64, 64, 3)
    assert props.opacity.shape == (2, 64, 64, 1)
    assert (props.rotation.double().norm(dim=-1) - 1).abs().max() <= 1e-6
    assert bool((props.scale > 0).all())
    assert bool(((props.opacity > 0) & (props.opacity < 1)).all())


def test_activation_zero_raw_outputs():
    assert torch.equal(activate_scale(torch.zeros(5, 3)), torch.ones(5, 3))
    assert torch.equal(activate_opacity(torch.zeros(5, 1)), torch.full((5, 1), 0.5))


def test_activations_on_adversarial_raw_outputs():
    raw = torch.cat([
        torch.zeros(1, 4),
        torch.full((1, 4), 1e-30),
        torch.full((1, 4), 1e30),
        torch.tensor([[1e-9, 0, 0, 0], [-3.0, 4.0, 0.0, 0.0]]),
        torch.randn(100, 4) * 1e4,
    ])
    q = activate_rotation(raw)
    assert (q.double().norm(dim=-1) - 1).abs().max() <= 1e-6
    extreme = torch.tensor([-1e30, -1e3, -20.0, 0.0, 20.0, 1e3, 1e30])
    s = activate_scale(extreme)
    o = activate_opacity(extreme)
    assert bool((s > 0).all()) and bool(torch.isfinite(s).all())
    assert s.max().item() == pytest.approx(math.exp(4.0))
    assert bool(((o > 0) & (o < 1)).all())


def test_assemble_cloud_counts_and_color_copy():
    B, H, W = 2, 64, 64
    img = torch.rand(B, H, W, 3)
    img[1, 10, 20] = torch.tensor([0.2, 0.4, 0.6])
    props = PropertyMaps(
        activate_rotation(torch.randn(B, H, W, 4)), torch.rand(B, H, W, 3) + 0.01, torch.full((B, H, W, 1), 0.5)
    )
    cloud = assemble_cloud(torch.randn(B * H * W, 3), props, img)
    assert len(cloud) == 8192
    idx = H * W + 10 * W + 20
    assert cloud.colors[idx].tolist() == torch.tensor([0.2, 0.4, 0.6]).tolist()
    assert cloud.colors.numpy().tobytes() == img.reshape(-1, 3).numpy().tobytes()
    with pytest.raises(ContractViolation):
        assemble_cloud(torch.randn(B * H * W - 1, 3), props, img)
