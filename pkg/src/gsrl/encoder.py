"""Frozen observation -> Gaussian-cloud encoder and point-budget downsampling."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
from torch import Tensor

from .camera import Camera
from .dataset import load_scene
from .errors import DatasetError
from .gaussians import GaussianCloud
from .pipeline import GSPipeline, SceneSample, select_source_views

DEFAULT_POINTS = 8192


@dataclass
class ObservationBatch:
    images: Tensor  # [V, H, W, 3]
    cameras: list[Camera]

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[-1] != 3:
            raise DatasetError(f"observation images must be [V, H, W, 3], got {tuple(self.images.shape)}")
        if len(self.cameras) != self.images.shape[0]:
            raise DatasetError(f"{self.images.shape[0]} images but {len(self.cameras)} cameras")
        if len(self.cameras) < 2:
            raise DatasetError("an observation needs at least 2 views for stereo depth")
        H, W = self.images.shape[1:3]
        for c in self.cameras:
            if (c.height, c.width) != (H, W):
                raise DatasetError("observation cameras and images disagree on resolution")

    @classmethod
    def from_dir(cls, directory: Union[str, Path]) -> "ObservationBatch":
        scene = load_scene(directory, with_depth=False)
        return cls(scene.images, list(scene.cameras))


def downsample(cloud: GaussianCloud, target: int, seed: int = 0) -> GaussianCloud:
    """Uniform random subset of ``min(n, target)`` Gaussians without replacement.

    Kept Gaussians retain their input order; ``n <= target`` returns the cloud itself.
    """
    if target < 1:
        raise ValueError("target must be >= 1")
    n = len(cloud)
    if n <= target:
        return cloud
    g = torch.Generator().manual_seed(seed)
    keep = torch.randperm(n, generator=g)[:target].sort().values
    return cloud.subset(keep)


def _partner(v: int, cameras: Sequence[Camera]) -> int:
    if len(cameras) == 2:
        return 1 - v
    return select_source_views(v, cameras)[0]


@torch.no_grad()
def encode_observation(
    obs: ObservationBatch,
    pipe: GSPipeline,
    points: Optional[int] = DEFAULT_POINTS,
    seed: int = 0,
) -> GaussianCloud:
    """Run the frozen pipeline over every view and return the downsampled cloud.

    Each view is paired with its closest other view for stereo depth; the pair is
    encoded once and each view keeps its own H*W Gaussians, so the concatenated
    cloud holds ``V * H * W`` candidates in view order before downsampling.
    """
    if pipe.training:
        pipe.eval()
    V, H, W, _ = obs.images.shape
    hw = H * W
    done: dict[tuple[int, int], GaussianCloud] = {}
    parts = []
    for v in range(V):
        p = _partner(v, obs.cameras)
        if (p, v) in done:
            parts.append(done[(p, v)].subset(torch.arange(hw, 2 * hw)))
            continue
        sample = SceneSample(
            target_image=obs.images[v],
            target_camera=obs.cameras[v],
            source_images=obs.images[[v, p]],
            source_cameras=[obs.cameras[v], obs.cameras[p]],
        )
        cloud = pipe.predict(sample).cloud.detach()
        done[(v, p)] = cloud
        parts.append(cloud.subset(torch.arange(hw)))
    cloud = GaussianCloud.cat(parts)
    return cloud if points is None else downsample(cloud, points, seed)
