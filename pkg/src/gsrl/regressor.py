"""Per-pixel Gaussian property regression.

Depth, upsampled stereo features and the source image are concatenated and fed
through a small UNet; three 1x1-conv heads then predict rotation, scale and
opacity for one Gaussian per pixel. Colors are copied from the source pixels.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ContractViolation, ShapeError
from .gaussians import GaussianCloud
from .depth_net import upsample_to

SCALE_RAW_RANGE = (-10.0, 4.0)
OPACITY_RAW_CLAMP = 15.0
QUAT_EPS = 1e-8


class FusedFeatures(NamedTuple):
    features: Tensor  # [B, H, W, D_R]
    inputs: tuple[str, ...]  # which sources were concatenated, in order


class PropertyMaps(NamedTuple):
    rotation: Tensor  # [B, H, W, 4]
    scale: Tensor  # [B, H, W, 3]
    opacity: Tensor  # [B, H, W, 1]


def activate_rotation(raw: Tensor) -> Tensor:
    """Unit quaternions from raw 4-vectors; norms below ``QUAT_EPS`` map to the identity."""
    # pre-scale by the largest component so huge raw outputs do not overflow the norm
    m = raw.detach().abs().amax(dim=-1, keepdim=True).clamp_min(1e-30)
    r = raw / m
    n = r.norm(dim=-1, keepdim=True) * m
    q = r / r.norm(dim=-1, keepdim=True).clamp_min(QUAT_EPS)
    ident = torch.zeros_like(raw)
    ident[..., 0] = 1.0
    return torch.where(n < QUAT_EPS, ident, q)


def activate_scale(raw: Tensor) -> Tensor:
    return torch.exp(raw.clamp(*SCALE_RAW_RANGE))


def activate_opacity(raw: Tensor) -> Tensor:
    return torch.sigmoid(raw.clamp(-OPACITY_RAW_CLAMP, OPACITY_RAW_CLAMP))


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


def _head(cin, hidden, cout):
    return nn.Sequential(
        nn.Conv2d(cin, hidden, 1), nn.ReLU(),
        nn.Conv2d(hidden, hidden, 1), nn.ReLU(),
        nn.Conv2d(hidden, cout, 1),
    )


class GaussianRegressor(nn.Module):
    def __init__(
        self,
        feat_ch: int = 32,
        use_feature_input: bool = True,
        d_r: int = 64,
        widths: Sequence[int] = (16, 32, 48, 64),
        head_hidden: int = 32,
        scale_bias: float = -2.8,
        opacity_bias: float = 2.0,
    ):
        super().__init__()
        self.use_feature_input = use_feature_input
        self.d_r = d_r
        in_ch = 1 + (feat_ch if use_feature_input else 3) + 3
        w0, w1, w2, w3 = widths
        self.enc0 = _block(in_ch, w0)
        self.enc1 = _block(w0, w1, 2)
        self.enc2 = _block(w1, w2, 2)
        self.enc3 = _block(w2, w3, 2)
        self.dec2 = _block(w3 + w2, w2)
        self.dec1 = _block(w2 + w1, w1)
        self.dec0 = nn.Sequential(nn.Conv2d(w1 + w0, d_r, 3, padding=1), nn.ReLU())
        self.rot_head = _head(d_r, head_hidden, 4)
        self.scale_head = _head(d_r, head_hidden, 3)
        self.opacity_head = _head(d_r, head_hidden, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        with torch.no_grad():
            self.rot_head[-1].bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))
            self.rot_head[-1].weight.mul_(0.1)
            self.scale_head[-1].bias.fill_(scale_bias)
            self.scale_head[-1].weight.mul_(0.1)
            self.opacity_head[-1].bias.fill_(opacity_bias)
            self.opacity_head[-1].weight.mul_(0.1)

    @property
    def input_names(self) -> tuple[str, ...]:
        return ("depth", "features" if self.use_feature_input else "image", "image")

    def fuse_features(self, depth: Tensor, feat: Tensor, img: Tensor, d_max: float) -> FusedFeatures:
        """depth [B, H, W], feat [B, h, w, C], img [B, H, W, 3] -> fused map [B, H, W, D_R].

        Depth enters as ``log(depth) / d_max``, the normalized log-depth in [0, 1].
        """
        B, H, W, _ = img.shape
        if depth.shape != (B, H, W):
            raise ShapeError(f"depth {tuple(depth.shape)} does not match image {tuple(img.shape)}")
        x_img = img.permute(0, 3, 1, 2)
        if self.use_feature_input:
            up = upsample_to(feat.permute(0, 3, 1, 2), H, W)
            if up.shape[-2:] != (H, W):
                raise ShapeError("upsampled features do not match image resolution")
            middle = up
        else:
            middle = x_img
        x = torch.cat([(torch.log(depth) / d_max)[:, None], middle, x_img], dim=1)
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:], mode="nearest"), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="nearest"), e1], 1))
        d0 = self.dec0(torch.cat([F.interpolate(d1, size=e0.shape[-2:], mode="nearest"), e0], 1))
        return FusedFeatures(d0.permute(0, 2, 3, 1), self.input_names)

    def predict_properties(self, fused: Tensor) -> PropertyMaps:
        """[B, H, W, D_R] -> activated rotation, scale and opacity maps."""
        f = fused.permute(0, 3, 1, 2)
        rot = activate_rotation(self.rot_head(f).permute(0, 2, 3, 1))
        scale = activate_scale(self.scale_head(f).permute(0, 2, 3, 1))
        opacity = activate_opacity(self.opacity_head(f).permute(0, 2, 3, 1))
        return PropertyMaps(rot, scale, opacity)

    def forward(self, depth: Tensor, feat: Tensor, img: Tensor, d_max: float) -> PropertyMaps:
        return self.predict_properties(self.fuse_features(depth, feat, img, d_max).features)


def assemble_cloud(positions: Tensor, props: PropertyMaps, images: Tensor) -> GaussianCloud:
    """One Gaussian per pixel of every view, views concatenated in order.

    positions [B*H*W, 3] (row-major per view), property maps [B, H, W, *],
    images [B, H, W, 3] whose pixel colors are copied verbatim.
    """
    B, H, W, _ = images.shape
    n = B * H * W
    if positions.shape != (n, 3):
        raise ContractViolation(f"{positions.shape[0]} positions for {n} property pixels")
    for name, m in zip(PropertyMaps._fields, props):
        if m.shape[:3] != (B, H, W):
            raise ContractViolation(f"{name} map {tuple(m.shape)} does not match images {tuple(images.shape)}")
    return GaussianCloud(
        positions,
        props.rotation.reshape(n, 4),
        props.scale.reshape(n, 3),
        images.reshape(n, 3),
        props.opacity.reshape(n),
    )
