"""End-to-end image-to-Gaussians pipeline: source-view selection, depth, regression,
refinement, rendering and the training losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .camera import Camera
from .depth_net import DepthNet, unproject
from .errors import ConfigError, DatasetError, TrainingAborted
from .gaussians import GaussianCloud
from .rasterizer import RasterSettings, rasterize
from .refine import KnnGraph, RefineNet, RefineOutput, build_knn
from .regressor import GaussianRegressor, assemble_cloud

DEPTH_SOURCES = ("predicted", "ground_truth")


def select_source_views(target: int, pool: Sequence[Camera]) -> tuple[int, int]:
    """The two views closest to ``target`` by camera-center distance; ties to the lower index."""
    if len(pool) < 3:
        raise DatasetError(f"source selection needs at least 3 views, got {len(pool)}")
    if not 0 <= target < len(pool):
        raise DatasetError(f"target view {target} outside pool of {len(pool)}")
    centers = torch.stack([c.center.double() for c in pool])
    d = (centers - centers[target]).norm(dim=-1)
    order = sorted((float(d[i]), i) for i in range(len(pool)) if i != target)
    return order[0][1], order[1][1]


@dataclass
class SceneSample:
    target_image: Tensor  # [H, W, 3]
    target_camera: Camera
    source_images: Tensor  # [2, H, W, 3]
    source_cameras: list[Camera]
    source_depths: Optional[Tensor] = None  # [2, H, W]
    key: tuple = ()

    def __post_init__(self):
        if self.source_images.shape[1:] != self.target_image.shape:
            raise DatasetError("target and source images differ in resolution")


def make_sample(scene, target: int) -> SceneSample:
    """Target view plus its two closest views from a loaded scene (``SceneData`` or ``SyntheticScene``)."""
    i, j = select_source_views(target, scene.cameras)
    depths = None if scene.depths is None else scene.depths[[i, j]]
    return SceneSample(
        scene.images[target],
        scene.cameras[target],
        scene.images[[i, j]],
        [scene.cameras[i], scene.cameras[j]],
        depths,
        (getattr(scene, "name", getattr(scene, "seed", None)), target, i, j),
    )


@dataclass
class PipelineConfig:
    use_feature_input: bool = True
    use_refinement: bool = True
    depth_source: str = "predicted"
    refine_residual: bool = False
    knn_k: int = 16
    n_planes: int = 32
    raster: RasterSettings = field(default_factory=RasterSettings)

    def __post_init__(self):
        if self.depth_source not in DEPTH_SOURCES:
            raise ConfigError(f"depth_source must be one of {DEPTH_SOURCES}, got {self.depth_source!r}")


@dataclass
class Geometry:
    """Frozen-depth quantities of one sample, reusable across stage-2 steps."""

    depth: Tensor  # [2, H, W] depth used for unprojection
    predicted_depth: Tensor  # [2, H, W]
    features: Tensor  # [2, h, w, C]
    positions: Tensor  # [2*H*W, 3]
    graph: Optional[KnnGraph]


@dataclass
class Prediction:
    cloud: GaussianCloud  # cloud that gets rendered
    raw_cloud: GaussianCloud  # regressor output before refinement
    refine_out: Optional[RefineOutput]
    geometry: Geometry


class GSPipeline(nn.Module):
    def __init__(self, stats: dict, config: Optional[PipelineConfig] = None):
        super().__init__()
        self.config = config or PipelineConfig()
        self.depth = DepthNet.from_stats(stats, n_planes=self.config.n_planes)
        self.regressor = GaussianRegressor(self.depth.feat_ch, self.config.use_feature_input)
        self.refine = RefineNet(residual=self.config.refine_residual)

    @property
    def d_max(self) -> float:
        return float(self.depth.d_max)

    def geometry(self, sample: SceneSample, with_graph: bool = True) -> Geometry:
        with torch.no_grad():
            imgs, cams = sample.source_images, sample.source_cameras
            out = self.depth.predict_pair(imgs[0], imgs[1], cams[0], cams[1])
            if self.config.depth_source == "ground_truth":
                if sample.source_depths is None:
                    raise DatasetError("ground-truth depth requested but the sample has none")
                depth = sample.source_depths.float()
            else:
                depth = out.depth
            positions = torch.cat([unproject(depth[k], cams[k]) for k in range(2)])
            graph = None
            if with_graph and self.config.use_refinement:
                graph = build_knn(positions, self.config.knn_k)
        return Geometry(depth, out.depth, out.features, positions, graph)

    def predict(self, sample: SceneSample, geometry: Optional[Geometry] = None) -> Prediction:
        geo = geometry or self.geometry(sample)
        imgs = sample.source_images
        props = self.regressor(geo.depth, geo.features, imgs, self.d_max)
        raw = assemble_cloud(geo.positions, props, imgs)
        if not self.config.use_refinement:
            return Prediction(raw, raw, None, geo)
        graph = geo.graph if geo.graph is not None else build_knn(geo.positions, self.config.knn_k)
        rout = self.refine(raw, graph)
        return Prediction(rout.cloud, raw, rout, geo)

    def render(self, cloud: GaussianCloud, cam: Camera) -> Tensor:
        return rasterize(cloud, cam, self.config.raster)

    def render_target(self, sample: SceneSample, geometry: Optional[Geometry] = None) -> tuple[Tensor, Prediction]:
        pred = self.predict(sample, geometry)
        return self.render(pred.cloud, sample.target_camera), pred


@dataclass
class LossReport:
    l_r: Tensor
    l_recon: Tensor
    l_total: Tensor
    step: int = 0

    def as_floats(self) -> dict:
        return {"step": self.step, "l_r": float(self.l_r), "l_recon": float(self.l_recon), "l_total": float(self.l_total)}


def compute_losses(
    rendered: Tensor,
    target: Tensor,
    props: Optional[Tensor] = None,
    props_recon: Optional[Tensor] = None,
    lam: float = 0.15,
    step: int = 0,
) -> LossReport:
    """L_r = mean squared pixel error; L_recon = mean squared error of encoded properties;
    L_total = L_r + lam * L_recon. Raises TrainingAborted on any non-finite term."""
    if rendered.shape != target.shape:
        raise ConfigError(f"rendered {tuple(rendered.shape)} vs target {tuple(target.shape)}")
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    l_r = (rendered - target).pow(2).mean()
    if props is None:
        l_recon = torch.zeros((), dtype=l_r.dtype)
    else:
        if props_recon is None or props.shape != props_recon.shape:
            raise ConfigError("reconstruction needs matching property tensors")
        l_recon = (props_recon - props).pow(2).mean()
    l_total = l_r + lam * l_recon
    terms = {"l_r": l_r, "l_recon": l_recon, "l_total": l_total}
    bad = [k for k, v in terms.items() if not math.isfinite(float(v.detach()))]
    if bad:
        dump = {k: float(v.detach()) for k, v in terms.items()}
        dump.update(
            step=step,
            rendered_nonfinite=int((~torch.isfinite(rendered)).sum()),
            target_nonfinite=int((~torch.isfinite(target)).sum()),
        )
        if props is not None:
            dump["props_nonfinite"] = int((~torch.isfinite(props)).sum())
            dump["recon_nonfinite"] = int((~torch.isfinite(props_recon)).sum())
        raise TrainingAborted(f"non-finite loss term(s) {bad} at step {step}: {dump}", dump)
    return LossReport(l_r, l_recon, l_total, step)


def prediction_losses(rendered: Tensor, target: Tensor, pred: Prediction, lam: float, step: int = 0) -> LossReport:
    if pred.refine_out is None:
        return compute_losses(rendered, target, lam=lam, step=step)
    return compute_losses(rendered, target, pred.refine_out.target, pred.refine_out.raw, lam, step)

