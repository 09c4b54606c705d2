"""Two-stage training, evaluation, checkpoints and the per-scene overfit mode.

Stage 1 pretrains the depth network with an L1 depth loss and keeps the
best-on-validation weights. Stage 2 freezes depth and trains the regressor and
refinement network jointly on ``L_r + lambda * L_recon``.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import torch
from torch import Tensor

from .camera import Camera
from .config import TrainConfig
from .dataset import Dataset
from .depth_net import DepthNet
from .errors import DatasetError, TrainingAborted
from .gaussians import GaussianCloud
from .metrics import psnr, ssim
from .pipeline import Geometry, GSPipeline, PipelineConfig, SceneSample, make_sample, prediction_losses
from .rasterizer import RasterSettings, rasterize
from .regressor import activate_opacity, activate_rotation, activate_scale
from .tensor_nn import ParamStore, adam_step, backward, load_checkpoint, load_module_state, module_state, save_checkpoint

log = logging.getLogger(__name__)

PathLike = Union[str, Path]
METRIC_COLUMNS = ("step", "l_r", "l_recon", "l_total", "psnr", "ssim")


# --------------------------------------------------------------------------- checkpoints


def _meta(pipe: GSPipeline) -> dict[str, Tensor]:
    c = pipe.config
    vals = {
        "d_max": float(pipe.depth.d_max),
        "depth_min": float(pipe.depth.planes[0]),
        "depth_max": float(pipe.depth.planes[-1]),
        "n_planes": pipe.depth.n_planes,
        "use_feature_input": float(c.use_feature_input),
        "use_refinement": float(c.use_refinement),
        "refine_residual": float(c.refine_residual),
        "ground_truth_depth": float(c.depth_source == "ground_truth"),
        "knn_k": c.knn_k,
    }
    return {f"meta.{k}": torch.tensor(float(v)) for k, v in vals.items()}


def pipeline_state(pipe: GSPipeline) -> dict[str, Tensor]:
    state = {}
    state.update(module_state(pipe.depth, "depth."))
    state.update(module_state(pipe.regressor, "regressor."))
    state.update(module_state(pipe.refine, "refine."))
    state.update(_meta(pipe))
    return state


def save_pipeline(pipe: GSPipeline, path: PathLike) -> None:
    save_checkpoint(path, pipeline_state(pipe))


def load_pipeline(path: PathLike, raster: Optional[RasterSettings] = None) -> GSPipeline:
    tensors = load_checkpoint(path)
    meta = {k[5:]: float(v) for k, v in tensors.items() if k.startswith("meta.")}
    if not meta:
        raise DatasetError(f"{path}: checkpoint has no meta.* records")
    cfg = PipelineConfig(
        use_feature_input=bool(meta["use_feature_input"]),
        use_refinement=bool(meta["use_refinement"]),
        depth_source="ground_truth" if meta["ground_truth_depth"] else "predicted",
        refine_residual=bool(meta["refine_residual"]),
        knn_k=int(meta["knn_k"]),
        n_planes=int(meta["n_planes"]),
        raster=raster or RasterSettings(),
    )
    stats = {"d_max": meta["d_max"], "depth_min": meta["depth_min"], "depth_max": meta["depth_max"]}
    pipe = GSPipeline(stats, cfg)
    load_module_state(pipe.depth, tensors, "depth.")
    if any(k.startswith("regressor.") for k in tensors):
        load_module_state(pipe.regressor, tensors, "regressor.")
        load_module_state(pipe.refine, tensors, "refine.")
    pipe.eval()
    return pipe


def state_bytes(module: torch.nn.Module) -> bytes:
    return b"".join(v.detach().cpu().numpy().tobytes() for v in module.state_dict().values())


# --------------------------------------------------------------------------- samples


def scene_samples(ds: Dataset, split: str) -> list[SceneSample]:
    out = []
    for name in ds.split(split):
        scene = ds.scene(name)
        for t in range(len(scene)):
            out.append(make_sample(scene, t))
    return out


def depth_pairs(samples: Sequence[SceneSample]) -> list[tuple[Tensor, Tensor, Camera, Camera, Tensor]]:
    """Unique (reference, second) source pairs in both roles, with reference ground truth."""
    seen = set()
    pairs = []
    for s in samples:
        if s.source_depths is None:
            raise DatasetError(f"sample {s.key} has no ground-truth depth")
        scene_id = s.key[0]
        views = s.key[2:4]
        for a, b in ((0, 1), (1, 0)):
            k = (scene_id, views[a], views[b])
            if k in seen:
                continue
            seen.add(k)
            pairs.append((s.source_images[a], s.source_images[b], s.source_cameras[a], s.source_cameras[b], s.source_depths[a]))
    return pairs


# --------------------------------------------------------------------------- stage 1


@dataclass
class Stage1Result:
    net: DepthNet
    losses: list[float] = field(default_factory=list)
    val_errors: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0


def depth_error(net: DepthNet, pairs, relative: bool = True, check_range: bool = True) -> float:
    """Mean absolute depth error over ``pairs``; relative to each map's ground-truth depth range."""
    errs = []
    hi = math.exp(float(net.d_max))
    with torch.no_grad():
        for ref, src, cr, cs, gt in pairs:
            d = net(ref[None], src[None], [cr], [cs]).depth[0]
            if check_range and not bool(((d > 1) & (d < hi)).all()):
                raise TrainingAborted("predicted depth left the (1, exp(d_max)) range")
            e = (d - gt).abs().mean().item()
            errs.append(e / float(gt.max() - gt.min()) if relative else e)
    return sum(errs) / max(len(errs), 1)


def train_stage1_depth(
    ds: Dataset,
    cfg: TrainConfig,
    out: Optional[PathLike] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> Stage1Result:
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    net = DepthNet.from_stats(ds.stats, n_planes=cfg.depth.n_planes)
    train = depth_pairs(scene_samples(ds, "train"))
    val = depth_pairs(scene_samples(ds, "val"))
    store = ParamStore(net, "depth.")
    res = Stage1Result(net)
    best_err = depth_error(net, val) if val else float("inf")
    best_state = copy.deepcopy(net.state_dict())
    res.val_errors.append((0, best_err))
    sc = cfg.stage1
    for step in range(1, sc.steps + 1):
        batch = [train[rng.randrange(len(train))] for _ in range(sc.batch)]
        ref, src, cr, cs, gt = zip(*batch)
        pred = net(torch.stack(ref), torch.stack(src), list(cr), list(cs))
        loss = (pred.depth - torch.stack(gt)).abs().mean()
        if not math.isfinite(loss.item()):
            raise TrainingAborted(f"non-finite depth loss at step {step}", {"step": step})
        backward(loss)
        adam_step(store, lr=sc.lr)
        res.losses.append(loss.item())
        if on_step:
            on_step(step, loss.item())
        if val and (step % sc.eval_every == 0 or step == sc.steps):
            err = depth_error(net, val)
            res.val_errors.append((step, err))
            log.info("stage1 step %d loss %.4f val_rel_err %.4f", step, loss.item(), err)
            if err < best_err:
                best_err, res.best_step = err, step
                best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    if out is not None:
        pipe = GSPipeline(ds.stats, cfg.pipeline_config())
        pipe.depth.load_state_dict(net.state_dict())
        save_checkpoint(out, {**module_state(net, "depth."), **_meta(pipe)})
    return res


# --------------------------------------------------------------------------- stage 2


@dataclass
class Stage2Result:
    pipe: GSPipeline
    reports: list[dict] = field(default_factory=list)
    snapshots: list[tuple[int, Path]] = field(default_factory=list)


def snapshot_steps(steps: int, fracs: Sequence[float]) -> list[int]:
    return sorted({max(1, round(f * steps)) for f in fracs}) if steps > 0 else []


def train_stage2_gs(
    ds: Dataset,
    depth_ckpt: Union[PathLike, dict],
    cfg: TrainConfig,
    out: Optional[PathLike] = None,
    metrics_csv: Optional[PathLike] = None,
    snapshot_dir: Optional[PathLike] = None,
    on_step: Optional[Callable[[int, dict, GSPipeline], None]] = None,
) -> Stage2Result:
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    pipe = GSPipeline(ds.stats, cfg.pipeline_config())
    tensors = depth_ckpt if isinstance(depth_ckpt, dict) else load_checkpoint(depth_ckpt)
    load_module_state(pipe.depth, tensors, "depth.")
    pipe.depth.requires_grad_(False)
    pipe.depth.eval()
    frozen = state_bytes(pipe.depth)

    params = ParamStore(pipe.regressor, "regressor.")
    if cfg.pipeline.use_refinement:
        params = ParamStore({**params.params, **ParamStore(pipe.refine, "refine.").params})

    samples = scene_samples(ds, "train")
    cache: dict[int, Geometry] = {}
    snaps = set(snapshot_steps(cfg.stage2.steps, cfg.stage2.snapshot_fracs))
    res = Stage2Result(pipe)
    writer = None
    fh = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
    try:
        for step in range(1, cfg.stage2.steps + 1):
            idx = [rng.randrange(len(samples)) for _ in range(cfg.stage2.batch)]
            total = None
            rows = []
            for i in idx:
                if i not in cache:
                    cache[i] = pipe.geometry(samples[i])
                img, pred = pipe.render_target(samples[i], cache[i])
                rep = prediction_losses(img, samples[i].target_image, pred, cfg.lam, step)
                total = rep.l_total if total is None else total + rep.l_total
                rows.append((rep, psnr(img.detach(), samples[i].target_image), ssim(img.detach(), samples[i].target_image)))
            backward(total / len(idx))
            for p in pipe.depth.parameters():
                if p.grad is not None:
                    raise TrainingAborted("a frozen depth parameter received a gradient")
            adam_step(params, lr=cfg.stage2.lr)
            n = len(rows)
            record = {
                "step": step,
                "l_r": sum(float(r.l_r.detach()) for r, _, _ in rows) / n,
                "l_recon": sum(float(r.l_recon.detach()) for r, _, _ in rows) / n,
                "l_total": sum(float(r.l_total.detach()) for r, _, _ in rows) / n,
                "psnr": sum(p for _, p, _ in rows) / n,
                "ssim": sum(s for _, _, s in rows) / n,
            }
            res.reports.append(record)
            if on_step is not None:
                on_step(step, record, pipe)
            if writer:
                writer.writerow([record[c] for c in METRIC_COLUMNS])
            if step % 100 == 0:
                log.info("stage2 step %d l_total %.5f psnr %.2f", step, record["l_total"], record["psnr"])
            if step in snaps and snapshot_dir is not None:
                path = Path(snapshot_dir) / f"snapshot_{step:06d}.ckpt"
                save_pipeline(pipe, path)
                res.snapshots.append((step, path))
    finally:
        if fh:
            fh.close()
    if state_bytes(pipe.depth) != frozen:
        raise TrainingAborted("depth parameters changed during stage 2 (freeze contract broken)")
    pipe.eval()
    if out is not None:
        save_pipeline(pipe, out)
    return res


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalRecord:
    scene: str
    view: int
    psnr: float
    ssim: float


def evaluate(pipe: GSPipeline, samples: Sequence[SceneSample]) -> list[EvalRecord]:
    out = []
    with torch.no_grad():
        for s in samples:
            img, _ = pipe.render_target(s)
            out.append(EvalRecord(str(s.key[0]), int(s.key[1]), psnr(img, s.target_image), ssim(img, s.target_image)))
    return out


def mean_psnr(records: Sequence[EvalRecord]) -> float:
    return sum(r.psnr for r in records) / len(records)


def mean_color_psnr(samples: Sequence[SceneSample]) -> float:
    """PSNR of predicting every target with its own per-channel mean color."""
    vals = []
    for s in samples:
        img = s.target_image
        vals.append(psnr(img.mean((0, 1), keepdim=True).expand_as(img), img))
    return sum(vals) / len(vals)


# --------------------------------------------------------------------------- per-scene overfit


@dataclass
class OverfitResult:
    cloud: GaussianCloud
    history: list[tuple[int, float]]  # (step, mean PSNR over the views)
    steps_run: int

    @property
    def best_psnr(self) -> float:
        return max(p for _, p in self.history)


def overfit_scene(
    images: Tensor,
    cameras: Sequence[Camera],
    depths: Tensor,
    n_gaussians: int = 4096,
    max_steps: int = 5000,
    target_psnr: Optional[float] = 30.0,
    eval_every: int = 250,
    seed: int = 0,
    lrs: Optional[dict] = None,
    settings: Optional[RasterSettings] = None,
) -> OverfitResult:
    """Directly optimize a Gaussian cloud against a few posed views of one scene.

    Gaussians start at ground-truth-depth unprojections of randomly chosen pixels
    with pixel-footprint isotropic scales. Views are visited round-robin, one per
    step. Stops early once the mean PSNR over all views reaches ``target_psnr``.
    """
    g = torch.Generator().manual_seed(seed)
    pts, cols, foot = [], [], []
    for img, cam, depth in zip(images, cameras, depths):
        pts.append(cam.camera_to_world(cam.rays().reshape(-1, 3) * depth.reshape(-1, 1)))
        cols.append(img.reshape(-1, 3))
        foot.append(depth.reshape(-1) / cam.fx)
    P, C, S = torch.cat(pts), torch.cat(cols), torch.cat(foot)
    pick = torch.randperm(len(P), generator=g)[:n_gaussians]
    raw = {
        "means": P[pick].clone(),
        "quats": torch.tensor([1.0, 0.0, 0.0, 0.0]).repeat(len(pick), 1),
        "log_scales": torch.log(S[pick])[:, None].repeat(1, 3),
        "color_logits": torch.logit(C[pick].clamp(0.02, 0.98)),
        "opacity_logits": torch.full((len(pick),), 2.0),
    }
    for v in raw.values():
        v.requires_grad_(True)
    rates = {"means": 1e-3, "quats": 1e-2, "log_scales": 1e-2, "color_logits": 5e-2, "opacity_logits": 5e-2}
    rates.update(lrs or {})
    store = ParamStore(raw)

    def cloud() -> GaussianCloud:
        return GaussianCloud(
            raw["means"],
            activate_rotation(raw["quats"]),
            activate_scale(raw["log_scales"]),
            torch.sigmoid(raw["color_logits"]),
            activate_opacity(raw["opacity_logits"]),
        )

    def score() -> float:
        with torch.no_grad():
            c = cloud()
            return sum(psnr(rasterize(c, cam, settings), img) for img, cam in zip(images, cameras)) / len(cameras)

    history = [(0, score())]
    step = 0
    for step in range(1, max_steps + 1):
        v = (step - 1) % len(cameras)
        loss = (rasterize(cloud(), cameras[v], settings) - images[v]).pow(2).mean()
        backward(loss)
        adam_step(store, lrs=rates)
        if step % eval_every == 0 or step == max_steps:
            history.append((step, score()))
            log.info("overfit step %d psnr %.2f", step, history[-1][1])
            if target_psnr is not None and history[-1][1] >= target_psnr:
                break
    return OverfitResult(cloud().detach(), history, step)
