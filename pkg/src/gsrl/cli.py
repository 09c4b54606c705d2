"""Command-line entry point: ``gsrl <command> ...`` (or ``python -m gsrl``)."""
from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import training
from .config import load_config
from .dataset import Dataset, generate_dataset, load_scene, write_png
from .encoder import ObservationBatch, downsample, encode_observation
from .errors import GSRLError
from .metrics import psnr, ssim
from .pipeline import make_sample
from .ply import export_ply

log = logging.getLogger("gsrl")

SWEEP_TARGETS = (2048, 4096, 8192, 10000)


def _targets(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("targets must be positive")
    return vals


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_gen_data(a) -> None:
    out = generate_dataset(a.out, a.seed, a.scenes, a.views, a.res)
    log.info("wrote dataset to %s", out)


def cmd_train_depth(a) -> None:
    cfg = load_config(a.config)
    res = training.train_stage1_depth(Dataset(a.data), cfg, out=a.out)
    log.info("best validation step %d; wrote %s", res.best_step, a.out)


def cmd_train_gs(a) -> None:
    cfg = load_config(a.config).with_ablation(a.ablate)
    snap_dir = Path(a.snapshots) if a.snapshots else None
    if snap_dir:
        snap_dir.mkdir(parents=True, exist_ok=True)
    training.train_stage2_gs(
        Dataset(a.data), a.depth_ckpt, cfg, out=a.out, metrics_csv=a.metrics, snapshot_dir=snap_dir
    )
    log.info("wrote %s", a.out)


def cmd_render(a) -> None:
    pipe = training.load_pipeline(a.ckpt)
    scene = load_scene(a.scene, with_depth=pipe.config.depth_source == "ground_truth")
    if not 0 <= a.view < len(scene):
        raise GSRLError(f"view {a.view} outside 0..{len(scene) - 1}")
    sample = make_sample(scene, a.view)
    with torch.no_grad():
        img, _ = pipe.render_target(sample)
    write_png(a.out, img.clamp(0, 1).numpy())
    log.info("view %d: PSNR %.2f dB vs ground truth", a.view, psnr(img, sample.target_image))


def cmd_eval(a) -> None:
    pipe = training.load_pipeline(a.ckpt)
    records = training.evaluate(pipe, training.scene_samples(Dataset(a.data), a.split))
    _write_rows(Path(a.report), ("scene", "view", "psnr", "ssim"), [(r.scene, r.view, r.psnr, r.ssim) for r in records])
    log.info("mean PSNR %.2f dB over %d views", training.mean_psnr(records), len(records))


def cmd_encode(a) -> None:
    pipe = training.load_pipeline(a.ckpt)
    cloud = encode_observation(ObservationBatch.from_dir(a.obs_dir), pipe, a.points, a.seed)
    export_ply(cloud, a.out)
    log.info("wrote %d Gaussians to %s", len(cloud), a.out)


def cmd_sweep_points(a) -> None:
    """Encode every view but the target, downsample to each budget, render the held-out target."""
    pipe = training.load_pipeline(a.ckpt)
    ds = Dataset(a.data)
    rows = []
    for name in ds.split(a.split)[: a.max_scenes]:
        scene = ds.scene(name)
        for t in range(len(scene))[: a.max_views]:
            others = [v for v in range(len(scene)) if v != t]
            obs = ObservationBatch(scene.images[others], [scene.cameras[v] for v in others])
            full = encode_observation(obs, pipe, points=None)
            for target in a.targets:
                cloud = downsample(full, target, a.seed)
                with torch.no_grad():
                    img = pipe.render(cloud, scene.cameras[t])
                rows.append((target, len(cloud), name, t, psnr(img, scene.images[t]), ssim(img, scene.images[t])))
    _write_rows(Path(a.report), ("target", "n_gaussians", "scene", "view", "psnr", "ssim"), rows)
    log.info("wrote %d rows to %s", len(rows), a.report)


def _snapshot_step(path: Path) -> int:
    m = re.search(r"(\d+)", path.stem)
    return int(m.group(1)) if m else -1


def cmd_sweep_quality(a) -> None:
    """Held-out PSNR/SSIM of every early-stop snapshot in a directory."""
    snaps = sorted(Path(a.snapshots).glob("*.ckpt"), key=_snapshot_step)
    if not snaps:
        raise GSRLError(f"no *.ckpt snapshots in {a.snapshots}")
    samples = training.scene_samples(Dataset(a.data), a.split)
    rows = []
    for path in snaps:
        recs = training.evaluate(training.load_pipeline(path), samples)
        rows.append((_snapshot_step(path), path.name, training.mean_psnr(recs), sum(r.ssim for r in recs) / len(recs)))
        log.info("%s: PSNR %.2f", path.name, rows[-1][2])
    _write_rows(Path(a.report), ("step", "snapshot", "psnr", "ssim"), rows)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsrl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multiview dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=30, help="training scenes (val/test add 10%% each)")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-depth", help="stage 1: pretrain the depth network")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_depth)

    p = sub.add_parser("train-gs", help="stage 2: train regressor and refinement on a frozen depth net")
    p.add_argument("--data", required=True)
    p.add_argument("--depth-ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", choices=("feat_inp", "refine", "real_depth"))
    p.add_argument("--metrics", help="CSV log: step,l_r,l_recon,l_total,psnr,ssim")
    p.add_argument("--snapshots", help="directory for early-stop snapshots")
    p.set_defaults(fn=cmd_train_gs)

    p = sub.add_parser("render", help="render one view of a scene from its two closest views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="per-view PSNR/SSIM report on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("encode", help="encode an observation directory into a PLY cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--obs-dir", required=True)
    p.add_argument("--points", type=int, default=8192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("sweep-points", help="point-budget sweep report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", type=_targets, default=list(SWEEP_TARGETS))
    p.add_argument("--report", default="sweep_points.csv")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--max-scenes", type=int, default=None)
    p.add_argument("--max-views", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep_points)

    p = sub.add_parser("sweep-quality", help="evaluate early-stop snapshots")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default="sweep_quality.csv")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_sweep_quality)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (GSRLError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
