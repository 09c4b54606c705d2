import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gsrl.camera import Camera  # noqa: E402
from gsrl.gaussians import GaussianCloud  # noqa: E402


def random_cloud(seed, n=50, dtype=torch.float32, spread=0.8):
    g = torch.Generator().manual_seed(seed)
    means = torch.randn(n, 3, generator=g, dtype=torch.float64) * spread
    quats = torch.randn(n, 4, generator=g, dtype=torch.float64)
    quats = quats / quats.norm(dim=-1, keepdim=True)
    scales = torch.rand(n, 3, generator=g, dtype=torch.float64) * 0.25 + 0.04
    colors = torch.rand(n, 3, generator=g, dtype=torch.float64)
    opac = torch.rand(n, generator=g, dtype=torch.float64) * 0.9 + 0.05
    return GaussianCloud(*(x.to(dtype) for x in (means, quats, scales, colors, opac)))


def small_camera(size=32, eye=(0.3, -4.0, 1.2)):
    return Camera.look_at(eye, (0, 0, 0), (0, 0, 1), size, size, 60.0)


def cloud_to_numpy(cloud):
    return [t.detach().double().numpy() for t in cloud.fields().values()]


@pytest.fixture
def cam32():
    return small_camera(32)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
