import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gsrl.camera import Camera
from gsrl.gaussians import (
    GaussianCloud,
    build_covariance,
    diagnostics,
    project_gaussian,
    project_gaussians,
    projection_jacobian,
)
from oracles import covariance, jacobian_fd

IDENTITY_Q = torch.tensor([[1.0, 0.0, 0.0, 0.0]])


def test_covariance_identity():
    cov = build_covariance(IDENTITY_Q, torch.ones(1, 3))
    assert torch.allclose(cov[0], torch.eye(3))


def test_covariance_axis_scale():
    cov = build_covariance(IDENTITY_Q, torch.tensor([[2.0, 1.0, 1.0]]))
    assert torch.allclose(cov[0], torch.diag(torch.tensor([4.0, 1.0, 1.0])))


def test_covariance_quarter_turn_about_z():
    q = torch.tensor([[math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)]])
    cov = build_covariance(q, torch.tensor([[2.0, 1.0, 1.0]]))
    # numpy oracle evaluates R S S^T R^T to diag(1, 4, 1)
    expected = covariance(q[0].numpy(), [2.0, 1.0, 1.0])
    assert np.allclose(expected, np.diag([1.0, 4.0, 1.0]), atol=1e-12)
    assert torch.allclose(cov[0], torch.diag(torch.tensor([1.0, 4.0, 1.0])), atol=1e-6)


def test_unnormalized_quaternion_is_normalized_and_counted():
    before = diagnostics["quat_renormalized"]
    q = torch.tensor([[2.0, 0.0, 0.0, 0.0]])
    cov = build_covariance(q, torch.tensor([[2.0, 1.0, 1.0]]))
    assert torch.allclose(cov[0], torch.diag(torch.tensor([4.0, 1.0, 1.0])))
    assert diagnostics["quat_renormalized"] == before + 1


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1),
    st.lists(st.floats(0.01, 3.0), min_size=3, max_size=3),
)
def test_covariance_matches_oracle_and_is_spd(q, s):
    cov = build_covariance(torch.tensor([q], dtype=torch.float64), torch.tensor([s], dtype=torch.float64))[0]
    ref = covariance(np.array(q), np.array(s))
    assert np.allclose(cov.numpy(), ref, rtol=1e-9, atol=1e-12)
    assert torch.allclose(cov, cov.T)
    assert torch.linalg.eigvalsh(cov).min() > 0


def _axis_camera(f=50.0, size=32):
    K = [[f, 0, size / 2], [0, f, size / 2], [0, 0, 1]]
    return Camera(K, torch.eye(3), torch.zeros(3), size, size)


@pytest.mark.parametrize("d", [1.5, 3.0, 10.0])
def test_on_axis_projection_scales_covariance(d):
    f = 50.0
    cam = _axis_camera(f)
    pg = project_gaussian(
        torch.tensor([0.0, 0.0, d]), IDENTITY_Q[0], torch.ones(3), torch.ones(3), 0.5, cam
    )
    assert pg is not None
    assert torch.allclose(pg.mean2d, torch.tensor([16.0, 16.0]))
    assert torch.allclose(pg.cov2d, (f / d) ** 2 * torch.eye(2), rtol=1e-5)
    assert pg.depth == pytest.approx(d)


def test_behind_camera_is_culled():
    cam = _axis_camera()
    assert project_gaussian(torch.tensor([0.0, 0.0, -1.0]), IDENTITY_Q[0], torch.ones(3), torch.ones(3), 0.5, cam) is None


def test_outside_viewport_is_culled():
    cam = _axis_camera()
    far_left = torch.tensor([-50.0, 0.0, 2.0])
    assert project_gaussian(far_left, IDENTITY_Q[0], torch.full((3,), 0.01), torch.ones(3), 0.5, cam) is None


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    K = np.array([[60.0, 0, 32], [0, 55.0, 30], [0, 0, 1]])
    pc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 6)])
    J = projection_jacobian(torch.tensor(pc)[None], K[0, 0], K[1, 1])[0].numpy()
    J_fd = jacobian_fd(K, pc)
    rel = np.abs(J - J_fd).max() / np.abs(J_fd).max()
    assert rel <= 1e-3


def test_projection_batch_matches_single():
    g = torch.Generator().manual_seed(3)
    means = torch.randn(10, 3, generator=g) * 0.3 + torch.tensor([0.0, 0.0, 4.0])
    quats = torch.randn(10, 4, generator=g)
    scales = torch.rand(10, 3, generator=g) * 0.2 + 0.05
    cam = _axis_camera()
    proj = project_gaussians(means, quats, scales, cam)
    for i in range(10):
        pg = project_gaussian(means[i], quats[i], scales[i], torch.ones(3), 0.5, cam)
        assert (pg is None) == (not bool(proj.visible[i]))
        if pg is not None:
            assert torch.allclose(pg.cov2d, proj.cov2d[i])


def test_cloud_shape_contract():
    with pytest.raises(ValueError):
        GaussianCloud(torch.zeros(3, 3), torch.zeros(3, 4), torch.zeros(2, 3), torch.zeros(3, 3), torch.zeros(3))


def test_cloud_invariant_check():
    cloud = GaussianCloud(
        torch.zeros(1, 3), IDENTITY_Q.clone(), torch.ones(1, 3), torch.full((1, 3), 0.5), torch.tensor([0.5])
    )
    cloud.check_invariants()
    bad = GaussianCloud(
        torch.zeros(1, 3), IDENTITY_Q.clone(), -torch.ones(1, 3), torch.full((1, 3), 0.5), torch.tensor([0.5])
    )
    with pytest.raises(ValueError):
        bad.check_invariants()
