"""Pinhole cameras with a world-to-camera pose.

Conventions: OpenCV axes (x right, y down, z forward), pixel ``(u, v)`` has its
center at integer coordinates, so column ``j`` of an image sits at ``u = j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor

from .errors import ConfigError


def _as_matrix(value, shape) -> Tensor:
    out = torch.as_tensor(value, dtype=torch.float32).reshape(shape)
    return out.clone()


@dataclass(eq=False)
class Camera:
    K: Tensor  # [3, 3]
    R: Tensor  # [3, 3] world -> camera rotation
    t: Tensor  # [3]   world -> camera translation
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    _K_inv: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        self.K = _as_matrix(self.K, (3, 3))
        self.R = _as_matrix(self.R, (3, 3))
        self.t = _as_matrix(self.t, (3,))
        self.width = int(self.width)
        self.height = int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ConfigError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        K64 = self.K.double()
        if abs(torch.linalg.det(K64).item()) < 1e-12:
            raise ConfigError("intrinsics matrix K is singular")
        if self.K[0, 1] != 0 or self.K[1, 0] != 0 or self.K[2].tolist() != [0.0, 0.0, 1.0]:
            raise ConfigError("intrinsics must be a skew-free pinhole matrix")
        R64 = self.R.double()
        err = (R64 @ R64.T - torch.eye(3, dtype=torch.float64)).abs().max().item()
        if err > 1e-5:
            raise ConfigError(f"pose rotation is not orthonormal (max error {err:.2e})")
        self._K_inv = torch.linalg.inv(K64).float()

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def K_inv(self) -> Tensor:
        return self._K_inv

    @property
    def center(self) -> Tensor:
        """Camera center in world coordinates."""
        return -(self.R.T @ self.t)

    def world_to_camera(self, points: Tensor) -> Tensor:
        return points @ self.R.to(points.dtype).T + self.t.to(points.dtype)

    def camera_to_world(self, points: Tensor) -> Tensor:
        return (points - self.t.to(points.dtype)) @ self.R.to(points.dtype)

    def project(self, points: Tensor) -> tuple[Tensor, Tensor]:
        """World points [N, 3] -> pixel coordinates [N, 2] and camera-space depth [N]."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        K = self.K.to(points.dtype)
        u = K[0, 0] * pc[:, 0] / z + K[0, 2]
        v = K[1, 1] * pc[:, 1] / z + K[1, 2]
        return torch.stack([u, v], dim=-1), z

    def pixel_grid(self, dtype=torch.float32) -> Tensor:
        """Homogeneous pixel coordinates [H, W, 3], row-major."""
        v, u = torch.meshgrid(
            torch.arange(self.height, dtype=dtype),
            torch.arange(self.width, dtype=dtype),
            indexing="ij",
        )
        return torch.stack([u, v, torch.ones_like(u)], dim=-1)

    def rays(self, dtype=torch.float32) -> Tensor:
        """Camera-space ray directions with unit z-component, [H, W, 3]."""
        return self.pixel_grid(dtype) @ self.K_inv.to(dtype).T

    def scaled(self, factor: float) -> "Camera":
        """Same pose, intrinsics for an image resampled by ``factor``.

        Pixel centers stay at integer coordinates: full-resolution ``u`` maps
        to ``u * factor``, which matches stride-2 convolutions with padding 1.
        """
        K = self.K.clone()
        K[:2] *= factor
        return Camera(
            K,
            self.R,
            self.t,
            max(1, round(self.width * factor)),
            max(1, round(self.height * factor)),
            self.near,
            self.far,
        )

    def to_dict(self) -> dict:
        return {
            "K": [float(x) for x in self.K.flatten()],
            "R": [float(x) for x in self.R.flatten()],
            "t": [float(x) for x in self.t],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict, near: float = 0.01, far: float = 100.0) -> "Camera":
        try:
            return cls(d["K"], d["R"], d["t"], d["width"], d["height"], d.get("near", near), d.get("far", far))
        except KeyError as exc:
            raise ConfigError(f"camera record is missing key {exc}") from None

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float],
        width: int,
        height: int,
        fov_deg: float,
        near: float = 0.01,
        far: float = 100.0,
    ) -> "Camera":
        """Camera at ``eye`` looking at ``target``; ``fov_deg`` is the horizontal field of view."""
        eye_t = torch.tensor(eye, dtype=torch.float64)
        fwd = torch.tensor(target, dtype=torch.float64) - eye_t
        fwd = fwd / fwd.norm()
        right = torch.linalg.cross(fwd, torch.tensor(up, dtype=torch.float64))
        if right.norm() < 1e-9:
            raise ConfigError("up vector is parallel to the viewing direction")
        right = right / right.norm()
        down = torch.linalg.cross(fwd, right)
        R = torch.stack([right, down, fwd])
        t = -R @ eye_t
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        K = torch.tensor([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])
        return cls(K, R.float(), t.float(), width, height, near, far)

