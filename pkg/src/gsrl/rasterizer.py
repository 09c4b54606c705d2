"""Tile-based, depth-sorted Gaussian rasterizer with a hand-written backward pass.

Each projected Gaussian contributes ``alpha = opacity * exp(-0.5 d^T Q d)`` to
the pixels inside its 99% ellipse, ``Q`` being the inverse of the dilated
screen-space covariance. Contributions are composited front to back.

Gaussians are binned into 16x16 tiles and sorted by depth inside every bin
(equal depths keep input order). Each (tile, Gaussian) pair emits one fragment
per covered pixel of that tile; a stable sort by pixel then yields every
pixel's front-to-back list, which is composited with a segmented scan.
Transmittance products are accumulated as float64 log-sums.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import torch
from torch import Tensor

from .camera import Camera
from .errors import ContractViolation
from .gaussians import CHI2_99, GaussianCloud, project_gaussians, projection_jacobian, quat_to_rotmat

# Upper bound on candidate fragments evaluated at once.
_CHUNK_FRAGMENTS = 1 << 21


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    eps2d: float = 0.3
    alpha_max: float = 0.9995
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


class _Binning(NamedTuple):
    mean2d: Tensor  # [N, 2]
    conic: Tensor  # [N, 3] (Qxx, Qxy, Qyy) of the inverse dilated covariance
    visible: Tensor  # [N] bool
    pair_tile: Tensor  # [M] tile id per (tile, gaussian) pair, sorted by tile then depth
    pair_gauss: Tensor  # [M]
    pix_box: Tensor  # [N, 4] long: col0, col1, row0, row1 (clamped to the image)
    tiles_x: int
    tiles_y: int


def _bin(means: Tensor, quats: Tensor, scales: Tensor, cam: Camera, s: RasterSettings) -> _Binning:
    proj = project_gaussians(means, quats, scales, cam, s.eps2d)
    dtype = means.dtype
    cov = proj.cov2d.detach() + s.eps2d * torch.eye(2, dtype=dtype)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    visible = proj.visible & (det > 0)

    ts = s.tile_size
    tiles_x = -(-cam.width // ts)
    tiles_y = -(-cam.height // ts)
    m = proj.mean2d.detach()
    r = torch.where(visible[:, None], proj.radius, torch.zeros_like(proj.radius))
    box = torch.stack(
        [
            torch.ceil(m[:, 0] - r[:, 0]).clamp(min=0, max=cam.width),
            torch.floor(m[:, 0] + r[:, 0]).clamp(min=-1, max=cam.width - 1),
            torch.ceil(m[:, 1] - r[:, 1]).clamp(min=0, max=cam.height),
            torch.floor(m[:, 1] + r[:, 1]).clamp(min=-1, max=cam.height - 1),
        ],
        dim=-1,
    )
    box = torch.where(visible[:, None], box, torch.tensor([0.0, -1.0, 0.0, -1.0], dtype=dtype)).long()

    vis = visible.nonzero().squeeze(1)
    order = vis[torch.sort(proj.depth.detach()[vis], stable=True).indices]
    bx = box[order]
    tx0 = torch.div(bx[:, 0], ts, rounding_mode="floor")
    tx1 = torch.div(bx[:, 1], ts, rounding_mode="floor")
    ty0 = torch.div(bx[:, 2], ts, rounding_mode="floor")
    ty1 = torch.div(bx[:, 3], ts, rounding_mode="floor")
    nx = (tx1 - tx0 + 1).clamp(min=0)
    ny = (ty1 - ty0 + 1).clamp(min=0)
    empty = (bx[:, 1] < bx[:, 0]) | (bx[:, 3] < bx[:, 2])
    counts = torch.where(empty, torch.zeros_like(nx), nx * ny)

    total = int(counts.sum())
    rep = torch.repeat_interleave(torch.arange(len(order)), counts)
    start = torch.cumsum(counts, 0) - counts
    local = torch.arange(total) - start[rep]
    nx_r = nx[rep].clamp(min=1)
    tile = (ty0[rep] + torch.div(local, nx_r, rounding_mode="floor")) * tiles_x + tx0[rep] + local % nx_r
    # pairs are generated in depth order, so a stable sort by tile keeps each bin depth-sorted
    srt = torch.sort(tile, stable=True)
    return _Binning(m, conic, visible, srt.values, order[rep[srt.indices]], box, tiles_x, tiles_y)


def _tile_groups(bins: _Binning, ts: int, width: int, height: int) -> Iterator[tuple[int, int]]:
    """Yield pair ranges [p0, p1) made of whole tiles with a bounded fragment count."""
    n = bins.pair_tile.numel()
    if n == 0:
        return
    csum = torch.cumsum(_pair_fragment_counts(bins, 0, n, ts, width, height), 0).tolist()
    tile_end = torch.ones(n, dtype=torch.bool)
    tile_end[:-1] = bins.pair_tile[1:] != bins.pair_tile[:-1]
    p0, base, last = 0, 0, None
    for e in tile_end.nonzero().squeeze(1).tolist():
        if csum[e] - base > _CHUNK_FRAGMENTS and last is not None:
            yield p0, last + 1
            p0, base = last + 1, csum[last]
        last = e
    yield p0, n


def _pair_fragment_counts(bins: _Binning, p0: int, p1: int, ts: int, width: int, height: int):
    lo_hi = _pair_boxes(bins, p0, p1, ts, width, height)
    c0, c1, r0, r1 = lo_hi.unbind(-1)
    return (c1 - c0 + 1).clamp(min=0) * (r1 - r0 + 1).clamp(min=0)


def _pair_boxes(bins: _Binning, p0: int, p1: int, ts: int, width: int, height: int) -> Tensor:
    """Pixel box of each pair: the Gaussian's box intersected with its tile."""
    t = bins.pair_tile[p0:p1]
    box = bins.pix_box[bins.pair_gauss[p0:p1]]
    tx = (t % bins.tiles_x) * ts
    ty = torch.div(t, bins.tiles_x, rounding_mode="floor") * ts
    return torch.stack(
        [
            torch.maximum(box[:, 0], tx),
            torch.minimum(box[:, 1], (tx + ts - 1).clamp(max=width - 1)),
            torch.maximum(box[:, 2], ty),
            torch.minimum(box[:, 3], (ty + ts - 1).clamp(max=height - 1)),
        ],
        dim=-1,
    )


class _Fragments(NamedTuple):
    gauss: Tensor  # [F] gaussian id, fragments sorted by pixel then depth
    pix: Tensor  # [F] linear pixel id
    seg: Tensor  # [F] segment (pixel) index inside this chunk
    seg_pix: Tensor  # [S] pixel id of each segment
    starts: Tensor  # [S] first fragment of each segment
    dx: Tensor
    dy: Tensor
    G: Tensor  # falloff exp(-0.5 maha)
    alpha: Tensor  # float64, zero for fragments removed by early termination
    active: Tensor  # fragments whose alpha varies smoothly with the parameters
    T_excl: Tensor  # float64 transmittance in front of each fragment
    T_final: Tensor  # [S] float64


def _segment_inclusive(x: Tensor, seg: Tensor, starts: Tensor) -> Tensor:
    cs = torch.cumsum(x, 0)
    base = cs.index_select(0, starts) - x.index_select(0, starts)
    return cs - base.index_select(0, seg)


def _fragments(bins: _Binning, p0: int, p1: int, opacities: Tensor, cam: Camera, s: RasterSettings) -> _Fragments:
    ts = s.tile_size
    dtype = opacities.dtype
    box = _pair_boxes(bins, p0, p1, ts, cam.width, cam.height)
    nfx = (box[:, 1] - box[:, 0] + 1).clamp(min=0)
    nfy = (box[:, 3] - box[:, 2] + 1).clamp(min=0)
    counts = nfx * nfy
    total = int(counts.sum())
    rep = torch.repeat_interleave(torch.arange(p1 - p0), counts)
    local = torch.arange(total) - (torch.cumsum(counts, 0) - counts).index_select(0, rep)
    w = nfx.index_select(0, rep).clamp(min=1)
    row0, col0 = box[:, 2].index_select(0, rep), box[:, 0].index_select(0, rep)
    pix = (row0 + torch.div(local, w, rounding_mode="floor")) * cam.width + col0 + local % w
    gp = bins.pair_gauss[p0:p1]
    # per-pair rows (mean x, mean y, Qxx, Qxy, Qyy, opacity), gathered once per fragment
    attrs = torch.cat([bins.mean2d.to(dtype), bins.conic.to(dtype), opacities[:, None]], 1).index_select(0, gp)

    def evaluate(rep, pix):
        a = attrs.index_select(0, rep)
        dx = (pix % cam.width).to(dtype) - a[:, 0]
        dy = torch.div(pix, cam.width, rounding_mode="floor").to(dtype) - a[:, 1]
        maha = a[:, 2] * dx * dx + 2 * a[:, 3] * dx * dy + a[:, 4] * dy * dy
        G = torch.exp(-0.5 * maha)
        return dx, dy, maha, G, a[:, 5] * G

    _, _, maha, _, raw = evaluate(rep, pix)
    keep_idx = ((maha <= CHI2_99) & (raw >= s.alpha_min)).nonzero().squeeze(1)
    # int32 keys sort about twice as fast as int64
    srt = torch.sort(pix.index_select(0, keep_idx).int(), stable=True)
    rep = rep.index_select(0, keep_idx.index_select(0, srt.indices))
    pix = srt.values.long()
    g = gp.index_select(0, rep)
    dx, dy, _, G, raw = evaluate(rep, pix)
    seg_pix, counts = torch.unique_consecutive(pix, return_counts=True)
    seg = torch.repeat_interleave(torch.arange(seg_pix.numel()), counts)
    starts = torch.cumsum(counts, 0) - counts

    alpha = raw.double().clamp(max=s.alpha_max)
    active = raw < s.alpha_max
    log_t = torch.log1p(-alpha)
    incl = _segment_inclusive(log_t, seg, starts)
    if s.transmittance_min > 0:
        # Early termination zeroes a suffix of every pixel's list; dropping those
        # fragments outright leaves all sums unchanged and shrinks later work.
        keep = torch.exp(incl) >= s.transmittance_min
        if not bool(keep.all()):
            idx = keep.nonzero().squeeze(1)
            g, pix, dx, dy, G, alpha, active = (t.index_select(0, idx) for t in (g, pix, dx, dy, G, alpha, active))
            seg_pix, counts = torch.unique_consecutive(pix, return_counts=True)
            seg = torch.repeat_interleave(torch.arange(seg_pix.numel()), counts)
            starts = torch.cumsum(counts, 0) - counts
            log_t = torch.log1p(-alpha)
            incl = _segment_inclusive(log_t, seg, starts)
    T_excl = torch.exp(incl - log_t)
    ends = starts + counts - 1
    T_final = torch.exp(incl[ends]) if ends.numel() else incl.new_zeros(0)
    return _Fragments(g, pix, seg, seg_pix, starts, dx, dy, G, alpha, active, T_excl, T_final)


def _check(means: Tensor):
    if means.shape[0] == 0:
        raise ContractViolation("cannot rasterize an empty Gaussian cloud")


def _all_fragments(bins: _Binning, opacities: Tensor, cam: Camera, s: RasterSettings) -> list[_Fragments]:
    return [_fragments(bins, p0, p1, opacities, cam, s) for p0, p1 in _tile_groups(bins, s.tile_size, cam.width, cam.height)]


@torch.no_grad()
def rasterize_forward(means, quats, scales, colors, opacities, cam: Camera, s: RasterSettings, keep: Optional[list] = None):
    """Returns the [H, W, 3] image and the [H, W] accumulated alpha.

    If ``keep`` is a list, the binning and fragment lists are appended to it so a
    following backward pass can skip recomputing them.
    """
    _check(means)
    dtype = means.dtype
    bins = _bin(means, quats, scales, cam, s)
    frags = _all_fragments(bins, opacities, cam, s)
    if keep is not None:
        keep.extend([bins, frags])
    n_pix = cam.width * cam.height
    rgb = torch.zeros(n_pix, 3, dtype=torch.float64)
    T_final = torch.ones(n_pix, dtype=torch.float64)
    col64 = colors.double()
    for fr in frags:
        w = fr.alpha * fr.T_excl
        rgb.index_add_(0, fr.pix, w[:, None] * col64.index_select(0, fr.gauss))
        T_final[fr.seg_pix] = fr.T_final
    bg = torch.tensor(s.background, dtype=torch.float64)
    rgb = rgb + T_final[:, None] * bg
    image = rgb.reshape(cam.height, cam.width, 3).to(dtype)
    alpha = (1 - T_final).reshape(cam.height, cam.width).to(dtype)
    return image, alpha


def _quat_backward(q: Tensor, dR: Tensor) -> Tensor:
    """Gradient w.r.t. unnormalized quaternions given dL/dR of the normalized rotation."""
    norm = q.norm(dim=-1, keepdim=True)
    qn = q / norm
    w, x, y, z = qn.unbind(-1)
    g = dR
    dw = 2 * (z * (g[:, 1, 0] - g[:, 0, 1]) + y * (g[:, 0, 2] - g[:, 2, 0]) + x * (g[:, 2, 1] - g[:, 1, 2]))
    dx = 2 * (
        y * (g[:, 1, 0] + g[:, 0, 1]) + z * (g[:, 2, 0] + g[:, 0, 2]) + w * (g[:, 2, 1] - g[:, 1, 2])
        - 2 * x * (g[:, 1, 1] + g[:, 2, 2])
    )
    dy = 2 * (
        x * (g[:, 1, 0] + g[:, 0, 1]) + w * (g[:, 0, 2] - g[:, 2, 0]) + z * (g[:, 2, 1] + g[:, 1, 2])
        - 2 * y * (g[:, 0, 0] + g[:, 2, 2])
    )
    dz = 2 * (
        w * (g[:, 1, 0] - g[:, 0, 1]) + x * (g[:, 2, 0] + g[:, 0, 2]) + y * (g[:, 2, 1] + g[:, 1, 2])
        - 2 * z * (g[:, 0, 0] + g[:, 1, 1])
    )
    dqn = torch.stack([dw, dx, dy, dz], dim=-1)
    return (dqn - qn * (qn * dqn).sum(-1, keepdim=True)) / norm


@torch.no_grad()
def rasterize_backward(
    grad_image: Tensor,
    means: Tensor,
    quats: Tensor,
    scales: Tensor,
    colors: Tensor,
    opacities: Tensor,
    cam: Camera,
    s: RasterSettings,
    grad_alpha: Optional[Tensor] = None,
    cache: Optional[list] = None,
) -> dict[str, Tensor]:
    """Analytic gradients of a scalar loss w.r.t. every Gaussian field.

    ``grad_image`` is dL/d(image) [H, W, 3]; ``grad_alpha`` optionally dL/d(alpha map).
    Binning and compositing are recomputed from the inputs unless ``cache`` holds
    the (binning, fragments) pair kept by the matching forward call. Culled
    Gaussians get exactly zero gradient.
    """
    _check(means)
    dtype = means.dtype
    N = means.shape[0]
    if cache:
        bins, frags = cache
    else:
        bins = _bin(means, quats, scales, cam, s)
        frags = _all_fragments(bins, opacities, cam, s)
    visible = bins.visible
    n_pix = cam.width * cam.height
    dC_img = grad_image.reshape(n_pix, 3).double()
    bg = torch.tensor(s.background, dtype=torch.float64)
    dT_final_img = (dC_img * bg).sum(-1)
    if grad_alpha is not None:
        dT_final_img = dT_final_img - grad_alpha.reshape(n_pix).double()

    d_color = torch.zeros(N, 3, dtype=torch.float64)
    d_opac = torch.zeros(N, dtype=torch.float64)
    d_mean2d = torch.zeros(N, 2, dtype=torch.float64)
    d_Q = torch.zeros(N, 3, dtype=torch.float64)  # d/dQxx, d/dQxy (both entries), d/dQyy
    col64 = colors.double()
    for fr in frags:
        dC = dC_img.index_select(0, fr.pix)
        w = fr.alpha * fr.T_excl
        d_color.index_add_(0, fr.gauss, w[:, None] * dC)

        s_dot = (col64.index_select(0, fr.gauss) * dC).sum(-1)
        ws = w * s_dot
        incl = _segment_inclusive(ws, fr.seg, fr.starts)
        ends = torch.empty_like(fr.starts)
        ends[:-1] = fr.starts[1:] - 1
        ends[-1:] = ws.numel() - 1
        tail = incl.index_select(0, ends).index_select(0, fr.seg) - incl
        tail = tail + (fr.T_final * dT_final_img.index_select(0, fr.seg_pix)).index_select(0, fr.seg)
        d_alpha = fr.T_excl * s_dot - tail / (1 - fr.alpha)
        d_alpha = torch.where(fr.active, d_alpha, torch.zeros_like(d_alpha))

        G = fr.G.double()
        d_opac.index_add_(0, fr.gauss, d_alpha * G)
        d_maha = -0.5 * d_alpha * opacities.index_select(0, fr.gauss).double() * G
        q = bins.conic.index_select(0, fr.gauss).double()
        dx, dy = fr.dx.double(), fr.dy.double()
        # d = pixel - mean, so dmaha/dmean = -2 Q d
        gx = -2 * d_maha * (q[:, 0] * dx + q[:, 1] * dy)
        gy = -2 * d_maha * (q[:, 1] * dx + q[:, 2] * dy)
        d_mean2d.index_add_(0, fr.gauss, torch.stack([gx, gy], -1))
        d_Q.index_add_(0, fr.gauss, torch.stack([d_maha * dx * dx, d_maha * 2 * dx * dy, d_maha * dy * dy], -1))

    d_color, d_opac, d_mean2d, d_Q = (t.to(dtype) for t in (d_color, d_opac, d_mean2d, d_Q))
    conic = torch.where(visible[:, None], bins.conic, torch.zeros_like(bins.conic)).to(dtype)
    # Q = inv(cov2d + eps I):  dL/dcov = -Q dL/dQ Q with symmetric dL/dQ
    Qm = torch.stack([conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]], -1).reshape(N, 2, 2)
    GQ = torch.stack([d_Q[:, 0], 0.5 * d_Q[:, 1], 0.5 * d_Q[:, 1], d_Q[:, 2]], -1).reshape(N, 2, 2)
    d_cov2d = -Qm @ GQ @ Qm

    W = cam.R.to(dtype)
    pc = cam.world_to_camera(means)
    # culled Gaussians may sit at z <= 0; give them a harmless depth, their gradients are zeroed below
    pc = torch.where(visible[:, None], pc, torch.ones_like(pc))
    J = projection_jacobian(pc, cam.fx, cam.fy)
    T = J @ W
    qn = quats / quats.norm(dim=-1, keepdim=True)
    Rg = quat_to_rotmat(qn)
    A = Rg * scales.unsqueeze(-2)
    sigma = A @ A.transpose(-1, -2)

    d_sigma = T.transpose(-1, -2) @ d_cov2d @ T
    d_T = 2 * d_cov2d @ T @ sigma
    d_J = d_T @ W.T
    d_A = 2 * d_sigma @ A
    d_R = d_A * scales.unsqueeze(-2)
    d_scales = (d_A * Rg).sum(-2)
    d_quats = _quat_backward(quats, d_R)

    x, y, z = pc.unbind(-1)
    fx, fy = cam.fx, cam.fy
    iz = 1 / z
    iz2 = iz * iz
    d_pc = torch.stack(
        [
            d_mean2d[:, 0] * fx * iz - d_J[:, 0, 2] * fx * iz2,
            d_mean2d[:, 1] * fy * iz - d_J[:, 1, 2] * fy * iz2,
            -d_mean2d[:, 0] * fx * x * iz2
            - d_mean2d[:, 1] * fy * y * iz2
            - d_J[:, 0, 0] * fx * iz2
            - d_J[:, 1, 1] * fy * iz2
            + d_J[:, 0, 2] * 2 * fx * x * iz2 * iz
            + d_J[:, 1, 2] * 2 * fy * y * iz2 * iz,
        ],
        -1,
    )
    grads = {
        "means": d_pc @ W,
        "quats": d_quats,
        "scales": d_scales,
        "colors": d_color,
        "opacities": d_opac,
    }
    return {
        k: torch.where(visible[:, None] if g.dim() == 2 else visible, g, torch.zeros_like(g))
        for k, g in grads.items()
    }


class _RasterizeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, quats, scales, colors, opacities, cam, settings):
        ctx.cache = []
        image, alpha = rasterize_forward(means, quats, scales, colors, opacities, cam, settings, ctx.cache)
        ctx.save_for_backward(means, quats, scales, colors, opacities)
        ctx.cam = cam
        ctx.settings = settings
        return image, alpha

    @staticmethod
    def backward(ctx, grad_image, grad_alpha):
        means, quats, scales, colors, opacities = ctx.saved_tensors
        g = rasterize_backward(
            grad_image, means, quats, scales, colors, opacities, ctx.cam, ctx.settings, grad_alpha, ctx.cache
        )
        ctx.cache = None
        return g["means"], g["quats"], g["scales"], g["colors"], g["opacities"], None, None


def rasterize(
    cloud: GaussianCloud,
    cam: Camera,
    settings: Optional[RasterSettings] = None,
    return_alpha: bool = False,
):
    """Render ``cloud`` from ``cam`` into an [H, W, 3] image (plus [H, W] alpha if asked)."""
    settings = settings or RasterSettings()
    image, alpha = _RasterizeFn.apply(
        cloud.means, cloud.quats, cloud.scales, cloud.colors, cloud.opacities, cam, settings
    )
    if return_alpha:
        return image, alpha
    return image


@torch.no_grad()
def pixel_trace(cloud: GaussianCloud, cam: Camera, u: int, v: int, settings: Optional[RasterSettings] = None):
    """Front-to-back contributions at pixel (u, v) as (index, alpha, transmittance after)."""
    s = settings or RasterSettings()
    bins = _bin(cloud.means, cloud.quats, cloud.scales, cam, s)
    target = v * cam.width + u
    out = []
    for p0, p1 in _tile_groups(bins, s.tile_size, cam.width, cam.height):
        fr = _fragments(bins, p0, p1, cloud.opacities, cam, s)
        sel = (fr.pix == target).nonzero().squeeze(1)
        for i in sel.tolist():
            a = float(fr.alpha[i])
            if a > 0:
                out.append((int(fr.gauss[i]), a, float(fr.T_excl[i] * (1 - fr.alpha[i]))))
    return out
