"""Two-view plane-sweep depth estimation and pixel unprojection.

A shared convolutional extractor produces stride-4 feature maps. The second
view's features are warped onto fronto-parallel planes of the reference camera
by plane-induced homographies and compared with a variance cost. A small conv
head turns the cost volume into a per-pixel logit

    depth = exp(d_max * sigmoid(logit)),

so predictions live in (1, exp(d_max)). ``d_max`` is the log of the largest
ground-truth depth in the dataset.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .camera import Camera
from .errors import ConfigError, ShapeError

# Logits are clamped so that depths stay strictly inside (1, exp(d_max)) in float32.
LOGIT_CLAMP = 12.0


def depth_from_logits(logits: Tensor, d_max: float) -> Tensor:
    return torch.exp(d_max * torch.sigmoid(logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))


def logits_from_depth(depth: Tensor, d_max: float) -> Tensor:
    frac = (torch.log(depth) / d_max).clamp(1e-6, 1 - 1e-6)
    return torch.logit(frac).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def inverse_depth_planes(depth_min: float, depth_max: float, n: int) -> Tensor:
    """``n`` depths, uniformly spaced in inverse depth, increasing."""
    if n < 2:
        raise ConfigError(f"a plane sweep needs at least 2 planes, got {n}")
    inv = torch.linspace(1.0 / depth_min, 1.0 / depth_max, n, dtype=torch.float64)
    return (1.0 / inv).float()


def upsample_to(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of [B, C, h, w] so that full-res pixel ``u`` reads low-res ``u * w / width``.

    Matches the stride convention of the extractor (pixel centers at integer
    coordinates at every level); samples beyond the last low-res center are clamped.
    """
    B, _, h, w = x.shape
    if (h, w) == (height, width):
        return x
    gx = torch.arange(width, dtype=x.dtype) * (w / width)
    gy = torch.arange(height, dtype=x.dtype) * (h / height)
    gx = 2 * gx / max(w - 1, 1) - 1
    gy = 2 * gy / max(h - 1, 1) - 1
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)
    return F.grid_sample(x, grid.expand(B, height, width, 2), mode="bilinear", padding_mode="border", align_corners=True)


def plane_homographies(cam_ref: Camera, cam_src: Camera, planes: Tensor, scale: float) -> Tensor:
    """[P, 3, 3] maps from reference pixels to source pixels for planes z_ref = d.

    ``scale`` resizes both intrinsics (feature resolution / image resolution).
    """
    K1 = cam_ref.K.double().clone()
    K2 = cam_src.K.double().clone()
    K1[:2] *= scale
    K2[:2] *= scale
    R1, t1 = cam_ref.R.double(), cam_ref.t.double()
    R2, t2 = cam_src.R.double(), cam_src.t.double()
    R_rel = R2 @ R1.T
    t_rel = t2 - R_rel @ t1
    n = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    d = planes.double()
    Hs = R_rel[None] + t_rel[None, :, None] * n[None, None, :] / d[:, None, None]
    return (K2[None] @ Hs @ torch.linalg.inv(K1)[None]).float()


def _warp_variance(f_ref: Tensor, f_src: Tensor, homs: Tensor) -> Tensor:
    """f_ref, f_src [B, C, h, w]; homs [B, P, 3, 3] -> variance cost [B, P, h, w]."""
    B, C, h, w = f_ref.shape
    P = homs.shape[1]
    v, u = torch.meshgrid(torch.arange(h, dtype=f_ref.dtype), torch.arange(w, dtype=f_ref.dtype), indexing="ij")
    pix = torch.stack([u, v, torch.ones_like(u)], dim=-1).reshape(-1, 3)  # [hw, 3]
    warped = pix @ homs.transpose(-1, -2)  # [B, P, hw, 3]
    z = warped[..., 2:].clamp_min(1e-6)
    uv = warped[..., :2] / z
    gx = 2 * uv[..., 0] / max(w - 1, 1) - 1
    gy = 2 * uv[..., 1] / max(h - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1).reshape(B, P * h, w, 2)
    sampled = F.grid_sample(f_src, grid, mode="bilinear", padding_mode="border", align_corners=True)
    sampled = sampled.reshape(B, C, P, h, w)
    # variance of the two observations {a, b} is ((a - b) / 2)^2
    diff = 0.5 * (f_ref[:, :, None] - sampled)
    return diff.pow(2).mean(1)


def build_cost_volume(
    f1: Tensor,
    f2: Tensor,
    cams: tuple[Camera, Camera],
    planes: Union[Tensor, Sequence[float]],
) -> Tensor:
    """Variance cost volume [h, w, P] of reference features ``f1`` [h, w, C] against ``f2``."""
    planes = torch.as_tensor(planes, dtype=torch.float32)
    if planes.numel() < 2:
        raise ConfigError(f"a plane sweep needs at least 2 planes, got {planes.numel()}")
    if not bool((planes[1:] > planes[:-1]).all()):
        raise ConfigError("plane depths must be strictly increasing")
    if f1.shape != f2.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    scale = f1.shape[1] / cams[0].width
    homs = plane_homographies(cams[0], cams[1], planes, scale)
    cost = _warp_variance(f1.permute(2, 0, 1)[None], f2.permute(2, 0, 1)[None], homs[None])
    return cost[0].permute(1, 2, 0)


def unproject(depth: Tensor, cam: Camera) -> Tensor:
    """World positions [H*W, 3] (row-major) of pixels lifted to ``depth`` [H, W]."""
    if tuple(depth.shape) != (cam.height, cam.width):
        raise ShapeError(f"depth map {tuple(depth.shape)} does not match camera {cam.height}x{cam.width}")
    rays = cam.rays(depth.dtype).reshape(-1, 3)
    return cam.camera_to_world(rays * depth.reshape(-1, 1))


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class DepthOutput(NamedTuple):
    depth: Tensor  # [B, H, W]
    logits: Tensor  # [B, H, W]
    features: Tensor  # [B, h, w, C] reference-view features


class DepthNet(nn.Module):
    def __init__(
        self,
        d_max: float,
        depth_min: float,
        depth_max: float,
        n_planes: int = 32,
        feat_ch: int = 32,
        hidden: int = 48,
    ):
        super().__init__()
        if d_max <= 0:
            raise ConfigError("d_max must be positive")
        if not (1.0 <= depth_min < depth_max):
            raise ConfigError(f"need 1 <= depth_min < depth_max, got {depth_min}, {depth_max}")
        self.feat_ch = feat_ch
        self.register_buffer("d_max", torch.tensor(float(d_max)))
        self.register_buffer("planes", inverse_depth_planes(depth_min, depth_max, n_planes))
        self.extractor = nn.Sequential(
            _conv(3, 16), nn.ReLU(),
            _conv(16, 24, 2), nn.ReLU(),
            _conv(24, 24), nn.ReLU(),
            _conv(24, 32, 2), nn.ReLU(),
            _conv(32, 32), nn.ReLU(),
            _conv(32, feat_ch),
        )
        self.regularizer = nn.Sequential(
            _conv(n_planes + feat_ch, hidden), nn.ReLU(),
            _conv(hidden, hidden), nn.ReLU(),
            _conv(hidden, hidden), nn.ReLU(),
            _conv(hidden, n_planes + 1),
        )
        # sharpness of the hand-wired "low cost -> high score" path
        self.log_beta = nn.Parameter(torch.tensor(math.log(4.0)))
        nn.init.zeros_(self.regularizer[-1].weight)
        nn.init.zeros_(self.regularizer[-1].bias)

    @classmethod
    def from_stats(cls, stats: Union[dict, str, Path], **kw) -> "DepthNet":
        if not isinstance(stats, dict):
            stats = json.loads(Path(stats).read_text())
        return cls(stats["d_max"], stats["depth_min"], stats["depth_max"], **kw)

    @property
    def n_planes(self) -> int:
        return self.planes.numel()

    def plane_logits(self) -> Tensor:
        return logits_from_depth(self.planes, float(self.d_max))

    def extract_features(self, img: Tensor) -> Tensor:
        """[H, W, 3] or [B, H, W, 3] image -> [h, w, C] or [B, h, w, C] features at stride 4."""
        single = img.dim() == 3
        x = img[None] if single else img
        if x.dim() != 4 or x.shape[-1] != 3:
            raise ShapeError(f"expected [H, W, 3] images, got {tuple(img.shape)}")
        H, W = x.shape[1:3]
        if H % 4 or W % 4:
            raise ShapeError(f"image size {H}x{W} is not divisible by 4")
        f = self.extractor(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return f[0] if single else f

    def regress_logits(self, cost: Tensor, feat: Tensor) -> Tensor:
        """cost [B, P, h, w], feat [B, C, h, w] -> low-res logits [B, 1, h, w]."""
        normed = cost / (cost.mean(1, keepdim=True) + 1e-6)
        out = self.regularizer(torch.cat([normed, feat], dim=1))
        scores = out[:, :-1] - self.log_beta.exp() * normed
        prob = torch.softmax(scores, dim=1)
        expected = (prob * self.plane_logits()[None, :, None, None]).sum(1, keepdim=True)
        return expected + out[:, -1:]

    def predict_depth(self, cost: Tensor, feat: Tensor, height: int, width: int) -> tuple[Tensor, Tensor]:
        """Full-resolution (depth, logits), each [B, H, W]."""
        logits = upsample_to(self.regress_logits(cost, feat), height, width)[:, 0]
        return depth_from_logits(logits, float(self.d_max)), logits

    def forward(self, ref: Tensor, src: Tensor, cams_ref: Sequence[Camera], cams_src: Sequence[Camera]) -> DepthOutput:
        """Depth of each reference image [B, H, W, 3] given a second view ``src``."""
        B, H, W, _ = ref.shape
        feats = self.extract_features(torch.cat([ref, src]))
        f_ref = feats[:B].permute(0, 3, 1, 2)
        f_src = feats[B:].permute(0, 3, 1, 2)
        scale = f_ref.shape[-1] / W
        homs = torch.stack([plane_homographies(a, b, self.planes, scale) for a, b in zip(cams_ref, cams_src)])
        cost = _warp_variance(f_ref, f_src, homs)
        depth, logits = self.predict_depth(cost, f_ref, H, W)
        return DepthOutput(depth, logits, feats[:B])

    def predict_pair(self, img1: Tensor, img2: Tensor, cam1: Camera, cam2: Camera) -> DepthOutput:
        """Depth for both views of a pair, swapping reference and second roles."""
        return self(torch.stack([img1, img2]), torch.stack([img2, img1]), [cam1, cam2], [cam2, cam1])
