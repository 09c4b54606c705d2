"""Gaussian cloud data model, covariance construction and screen-space projection."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
from torch import Tensor

from .camera import Camera
from .errors import ContractViolation

# -2 ln(0.01): squared Mahalanobis radius holding 99% of a 2D Gaussian's mass.
CHI2_99 = -2.0 * math.log(0.01)
QUAT_TOL = 1e-6

diagnostics: Counter = Counter()


@dataclass(eq=False)
class GaussianCloud:
    """Ordered set of 3D Gaussians stored as parallel tensors.

    ``quats`` are (w, x, y, z). ``features`` optionally carries one auxiliary
    vector per Gaussian.
    """

    means: Tensor  # [N, 3]
    quats: Tensor  # [N, 4]
    scales: Tensor  # [N, 3]
    colors: Tensor  # [N, 3]
    opacities: Tensor  # [N]
    features: Optional[Tensor] = None

    def __post_init__(self):
        n = self.means.shape[0]
        shapes = {
            "means": (self.means, (n, 3)),
            "quats": (self.quats, (n, 4)),
            "scales": (self.scales, (n, 3)),
            "colors": (self.colors, (n, 3)),
            "opacities": (self.opacities, (n,)),
        }
        for name, (value, shape) in shapes.items():
            if tuple(value.shape) != shape:
                raise ContractViolation(f"{name} has shape {tuple(value.shape)}, expected {shape}")
        if self.features is not None and self.features.shape[0] != n:
            raise ContractViolation("features must have one row per Gaussian")

    def __len__(self) -> int:
        return self.means.shape[0]

    def fields(self) -> dict[str, Tensor]:
        return {
            "means": self.means,
            "quats": self.quats,
            "scales": self.scales,
            "colors": self.colors,
            "opacities": self.opacities,
        }

    def subset(self, index: Tensor) -> "GaussianCloud":
        feats = None if self.features is None else self.features[index]
        return GaussianCloud(*(v[index] for v in self.fields().values()), features=feats)

    def detach(self) -> "GaussianCloud":
        feats = None if self.features is None else self.features.detach()
        return GaussianCloud(*(v.detach() for v in self.fields().values()), features=feats)

    @staticmethod
    def cat(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        if not clouds:
            raise ContractViolation("cannot concatenate an empty list of clouds")
        parts = [torch.cat([c.fields()[k] for c in clouds]) for k in clouds[0].fields()]
        feats = None
        if all(c.features is not None for c in clouds):
            feats = torch.cat([c.features for c in clouds])
        return GaussianCloud(*parts, features=feats)

    def check_invariants(self, quat_tol: float = QUAT_TOL) -> None:
        """Raise ContractViolation if any Gaussian breaks the value-range invariants."""
        norms = self.quats.detach().double().norm(dim=-1)
        if (norms - 1).abs().max().item() > quat_tol:
            raise ContractViolation("rotation quaternions are not unit length")
        if not bool((self.scales > 0).all()):
            raise ContractViolation("scales must be strictly positive")
        o = self.opacities
        if not bool(((o > 0) & (o < 1)).all()):
            raise ContractViolation("opacities must lie in (0, 1)")
        c = self.colors
        if not bool(((c >= 0) & (c <= 1)).all()):
            raise ContractViolation("colors must lie in [0, 1]")


def normalize_quats(quats: Tensor) -> Tensor:
    norms = quats.norm(dim=-1, keepdim=True)
    off = ((norms - 1).abs() > QUAT_TOL).sum().item()
    if off:
        diagnostics["quat_renormalized"] += int(off)
    return quats / norms


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Unit quaternions (w, x, y, z) [..., 4] -> rotation matrices [..., 3, 3]."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def build_covariance(quats: Tensor, scales: Tensor) -> Tensor:
    """Sigma = R S S^T R^T for batched quaternions [N, 4] and scales [N, 3].

    Quaternions off unit length are normalized; the count is recorded in
    ``diagnostics["quat_renormalized"]``.
    """
    R = quat_to_rotmat(normalize_quats(quats))
    A = R * scales.unsqueeze(-2)
    return A @ A.transpose(-1, -2)


class Projection(NamedTuple):
    mean2d: Tensor  # [N, 2]
    cov2d: Tensor  # [N, 2, 2], before screen-space dilation
    depth: Tensor  # [N]
    visible: Tensor  # [N] bool
    radius: Tensor  # [N, 2] half-extent of the 99% ellipse (after dilation)


def projection_jacobian(pc: Tensor, fx: float, fy: float) -> Tensor:
    """2x3 Jacobian of the perspective map at camera-space points [N, 3]."""
    x, y, z = pc.unbind(-1)
    zero = torch.zeros_like(z)
    iz = 1.0 / z
    row0 = torch.stack([fx * iz, zero, -fx * x * iz * iz], dim=-1)
    row1 = torch.stack([zero, fy * iz, -fy * y * iz * iz], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def project_gaussians(
    means: Tensor,
    quats: Tensor,
    scales: Tensor,
    cam: Camera,
    eps2d: float = 0.3,
) -> Projection:
    """Project Gaussians into ``cam`` with the local affine approximation."""
    dtype = means.dtype
    W = cam.R.to(dtype)
    pc = cam.world_to_camera(means)
    z = pc[:, 2]
    safe_z = torch.where(z.abs() < 1e-6, torch.full_like(z, 1e-6), z)
    pcs = torch.stack([pc[:, 0], pc[:, 1], safe_z], dim=-1)
    K = cam.K.to(dtype)
    u = K[0, 0] * pcs[:, 0] / safe_z + K[0, 2]
    v = K[1, 1] * pcs[:, 1] / safe_z + K[1, 2]
    mean2d = torch.stack([u, v], dim=-1)

    J = projection_jacobian(pcs, cam.fx, cam.fy)
    sigma = build_covariance(quats, scales)
    T = J @ W
    cov2d = T @ sigma @ T.transpose(-1, -2)

    dil = cov2d.detach() + eps2d * torch.eye(2, dtype=dtype)
    radius = torch.sqrt(CHI2_99 * torch.stack([dil[:, 0, 0], dil[:, 1, 1]], dim=-1).clamp_min(0))
    in_depth = (z >= cam.near) & (z <= cam.far)
    lo = mean2d.detach() - radius
    hi = mean2d.detach() + radius
    on_screen = (hi[:, 0] >= -0.5) & (lo[:, 0] <= cam.width - 0.5) & (hi[:, 1] >= -0.5) & (lo[:, 1] <= cam.height - 0.5)
    finite = torch.isfinite(mean2d.detach()).all(-1) & torch.isfinite(radius).all(-1)
    return Projection(mean2d, cov2d, z, in_depth & on_screen & finite, radius)


@dataclass(eq=False)
class ProjectedGaussian:
    mean2d: Tensor
    cov2d: Tensor
    depth: float
    color: Tensor
    opacity: float


def project_gaussian(
    position: Tensor,
    rotation: Tensor,
    scale: Tensor,
    color: Tensor,
    opacity: float,
    cam: Camera,
    eps2d: float = 0.3,
) -> Optional[ProjectedGaussian]:
    """Project a single Gaussian; returns None when it is culled."""
    proj = project_gaussians(position.reshape(1, 3), rotation.reshape(1, 4), scale.reshape(1, 3), cam, eps2d)
    if not bool(proj.visible[0]):
        return None
    return ProjectedGaussian(proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]), color, float(opacity))
