"""Procedural multiview scenes rendered by analytic ray casting.

A scene is a flat-colored ground plane (z = 0, z-up world; optionally
checkered) with spheres and axis-aligned boxes resting on it, observed by a
ring arc of cameras looking at the origin. Depth maps are exact z-depths of the first ray hit at pixel centers;
colors use per-primitive albedo, an ambient term and one Lambertian light,
supersampled inside each pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .camera import Camera
from .errors import ConfigError, GenerationError


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float]


Primitive = Union[Sphere, Box]


@dataclass
class Ground:
    color_a: tuple[float, float, float] = (0.8, 0.8, 0.8)
    color_b: tuple[float, float, float] = (0.3, 0.3, 0.3)
    checker: Optional[float] = None  # square size; None -> uniform color_a


@dataclass
class SceneSpec:
    n_views: int = 8
    res: int = 64
    n_spheres: tuple[int, int] = (1, 3)
    n_boxes: tuple[int, int] = (0, 2)
    sphere_radius: tuple[float, float] = (0.25, 0.5)
    box_half_extent: tuple[float, float] = (0.15, 0.35)
    placement_radius: float = 1.2
    ring_radius: float = 3.0
    ring_height: float = 4.0
    arc_deg: float = 120.0
    fov_deg: float = 45.0
    supersample: int = 3
    ground_checker: bool = False  # textured ground (off: single ground albedo)
    ambient: float = 0.35
    diffuse: float = 0.65
    light_dir: tuple[float, float, float] = (0.4, 0.3, 0.85)

    def validate(self) -> None:
        if self.n_views < 3:
            raise ConfigError("a scene needs at least 3 views")
        if self.res < 4 or self.res % 4:
            raise ConfigError("image resolution must be a positive multiple of 4")
        if self.supersample < 1:
            raise ConfigError("supersample must be >= 1")
        for lo, hi in (self.n_spheres, self.n_boxes, self.sphere_radius, self.box_half_extent):
            if lo < 0 or hi < lo:
                raise ConfigError("range bounds must satisfy 0 <= lo <= hi")


@dataclass
class SyntheticScene:
    seed: int
    primitives: list
    ground: Ground
    cameras: list[Camera]
    images: torch.Tensor  # [V, H, W, 3], values on the 8-bit grid
    depths: torch.Tensor  # [V, H, W] z-depth
    spec: SceneSpec = field(default_factory=SceneSpec)


def ring_cameras(spec: SceneSpec, azimuth0: float = 0.0) -> list[Camera]:
    cams = []
    span = math.radians(spec.arc_deg)
    for i in range(spec.n_views):
        phi = azimuth0 + (span * i / (spec.n_views - 1) if spec.n_views > 1 else 0.0)
        eye = (spec.ring_radius * math.cos(phi), spec.ring_radius * math.sin(phi), spec.ring_height)
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), spec.res, spec.res, spec.fov_deg))
    return cams


def _sample_primitives(rng: np.random.Generator, spec: SceneSpec) -> list:
    prims: list = []

    def spot():
        r = spec.placement_radius * math.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * math.pi)
        return r * math.cos(a), r * math.sin(a)

    def albedo():
        return tuple(float(c) for c in rng.uniform(0.15, 0.95, size=3))

    for _ in range(rng.integers(spec.n_spheres[0], spec.n_spheres[1] + 1)):
        x, y = spot()
        rad = float(rng.uniform(*spec.sphere_radius))
        prims.append(Sphere((x, y, rad), rad, albedo()))
    for _ in range(rng.integers(spec.n_boxes[0], spec.n_boxes[1] + 1)):
        x, y = spot()
        h = rng.uniform(*spec.box_half_extent, size=3)
        prims.append(Box((x - h[0], y - h[1], 0.0), (x + h[0], y + h[1], 2 * h[2]), albedo()))
    return prims


def ray_cast(
    origins: np.ndarray,
    dirs: np.ndarray,
    primitives: Sequence[Primitive],
    ground: Optional[Ground] = None,
):
    """First hit along rays ``origins + t * dirs`` ([N, 3] float64, t > 0).

    Returns (t [N] with inf for misses, unit normals [N, 3], albedo [N, 3]).
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    color = np.zeros((n, 3))
    eps = 1e-9

    def take(t, nrm, alb):
        closer = (t > eps) & (t < t_best)
        t_best[closer] = t[closer]
        normal[closer] = nrm[closer]
        color[closer] = alb[closer] if alb.ndim == 2 else alb

    if ground is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dirs[:, 2] < 0, -origins[:, 2] / dirs[:, 2], np.inf)
        hit = origins + np.where(np.isfinite(t), t, 0)[:, None] * dirs
        if ground.checker is None:
            alb = np.broadcast_to(np.asarray(ground.color_a, dtype=np.float64), (n, 3))
        else:
            parity = (np.floor(hit[:, 0] / ground.checker) + np.floor(hit[:, 1] / ground.checker)) % 2
            alb = np.where(parity[:, None] == 0, np.asarray(ground.color_a), np.asarray(ground.color_b))
        take(t, np.broadcast_to([0.0, 0.0, 1.0], (n, 3)), alb)

    for p in primitives:
        alb = np.asarray(p.albedo, dtype=np.float64)
        if isinstance(p, Sphere):
            c = np.asarray(p.center, dtype=np.float64)
            oc = origins - c
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = np.einsum("ij,ij->i", oc, dirs)
            cc = np.einsum("ij,ij->i", oc, oc) - p.radius**2
            disc = b * b - a * cc
            sq = np.sqrt(np.maximum(disc, 0))
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
            t = np.where(t0 > eps, t0, t1)
            t = np.where(disc >= 0, t, np.inf)
            nrm = (origins + np.where(np.isfinite(t), t, 0)[:, None] * dirs - c) / p.radius
            take(t, nrm, alb)
        elif isinstance(p, Box):
            lo = np.asarray(p.lo, dtype=np.float64)
            hi = np.asarray(p.hi, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                ta = (lo - origins) * inv
                tb = (hi - origins) * inv
            tmin = np.minimum(ta, tb)
            tmax = np.maximum(ta, tb)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            t_near = tmin.max(1)
            t_far = tmax.min(1)
            axis = tmin.argmax(1)
            ok = (t_near <= t_far) & (t_far > eps) & (t_near > eps)
            t = np.where(ok, t_near, np.inf)
            nrm = np.zeros((n, 3))
            nrm[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
            take(t, nrm, alb)
        else:
            raise ConfigError(f"unknown primitive {type(p).__name__}")
    return t_best, normal, color


def _shade(normal: np.ndarray, albedo: np.ndarray, spec: SceneSpec) -> np.ndarray:
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.clip(normal @ light, 0.0, None)
    return np.clip(albedo * (spec.ambient + spec.diffuse * lam)[:, None], 0.0, 1.0)


def render_view(
    cam: Camera,
    primitives: Sequence[Primitive],
    ground: Optional[Ground],
    spec: SceneSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """(image [H, W, 3] float64, z-depth [H, W] float64) for one camera."""
    K_inv = np.linalg.inv(cam.K.double().numpy())
    R = cam.R.double().numpy()
    origin = -R.T @ cam.t.double().numpy()
    H, W = cam.height, cam.width

    def cast(us, vs):
        pix = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)], axis=-1)
        d_cam = pix @ K_inv.T  # unit z-component: ray parameter equals z-depth
        d_world = d_cam @ R
        return ray_cast(np.broadcast_to(origin, d_world.shape), d_world, primitives, ground)

    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    depth, _, _ = cast(u, v)

    s = spec.supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros((H * W, 3))
    for dv in offs:
        for du in offs:
            t, nrm, alb = cast(u + du, v + dv)
            shaded = _shade(nrm, alb, spec)
            acc += np.where(np.isfinite(t)[:, None], shaded, 0.0)
    return (acc / (s * s)).reshape(H, W, 3), depth.reshape(H, W)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


def generate_scene(
    seed: int,
    spec: Optional[SceneSpec] = None,
    primitives: Optional[list] = None,
    cameras: Optional[list[Camera]] = None,
) -> SyntheticScene:
    """Deterministic scene for ``seed``; explicit ``primitives``/``cameras`` override sampling."""
    spec = spec or SceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    ground = Ground(
        tuple(float(c) for c in rng.uniform(0.55, 0.95, 3)),
        tuple(float(c) for c in rng.uniform(0.05, 0.4, 3)),
        float(rng.uniform(0.4, 0.7)) if spec.ground_checker else None,
    )
    azimuth0 = float(rng.uniform(0, 2 * math.pi))
    if primitives is None:
        primitives = _sample_primitives(rng, spec)
    if cameras is None:
        cameras = ring_cameras(spec, azimuth0)
    if len(cameras) < 3:
        raise ConfigError("a scene needs at least 3 cameras")

    images, depths = [], []
    for i, cam in enumerate(cameras):
        img, depth = render_view(cam, primitives, ground, spec)
        if not np.isfinite(depth).all():
            raise GenerationError(f"view {i}: some pixel rays miss all geometry")
        if depth.min() < 1.0:
            raise GenerationError(f"view {i}: geometry at depth {depth.min():.3f} < 1 from the camera")
        images.append(quantize(img))
        depths.append(depth)
    return SyntheticScene(
        seed,
        list(primitives),
        ground,
        list(cameras),
        torch.from_numpy(np.stack(images)).float(),
        torch.from_numpy(np.stack(depths)).float(),
        spec,
    )
