"""End-to-end acceptance suite: one test (and one PASS/FAIL line) per criterion.

The trained-pipeline criteria share one session fixture: a 30-scene synthetic
dataset, one depth pretraining run and four stage-2 runs (full model plus three
ablations) on the same seed.  Expect roughly an hour on one CPU core.
"""
import csv
import time

import numpy as np
import pytest
import torch

import conftest
from gsrl import training
from gsrl.camera import Camera
from gsrl.cli import SWEEP_TARGETS, main
from gsrl.config import TrainConfig
from gsrl.dataset import Dataset, generate_dataset
from gsrl.encoder import ObservationBatch, downsample, encode_observation
from gsrl.gaussians import GaussianCloud
from gsrl.metrics import psnr
from gsrl.pipeline import GSPipeline, make_sample, prediction_losses
from gsrl.ply import export_ply, import_ply
from gsrl.rasterizer import RasterSettings, rasterize, rasterize_backward
from gsrl.refine import build_knn
from conftest import cloud_to_numpy, random_cloud
from oracles import central_differences, knn_bruteforce, relative_error, render_bruteforce

pytestmark = pytest.mark.slow

SEED = 0
EXACT = RasterSettings(alpha_min=0.0, transmittance_min=0.0)
ABLATIONS = ("refine", "feat_inp", "real_depth")


def _report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} -- {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


def _random_camera(g: torch.Generator):
    az = float(torch.rand((), generator=g)) * 2 * np.pi
    el = 0.2 + float(torch.rand((), generator=g)) * 0.8
    r = 3.5 + float(torch.rand((), generator=g)) * 1.5
    eye = (r * np.cos(az) * np.cos(el), r * np.sin(az) * np.cos(el), r * np.sin(el))
    return Camera.look_at(eye, (0, 0, 0), (0, 0, 1), 32, 32, 50.0 + 20.0 * float(torch.rand((), generator=g)))


# --------------------------------------------------------------------------- shared training run


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    ds = Dataset(generate_dataset(root / "data", seed=SEED, scenes=30, views=8, res=64))
    cfg = TrainConfig(seed=SEED)
    stage1 = training.train_stage1_depth(ds, cfg, out=root / "depth.ckpt")
    (root / "snaps").mkdir()
    full = training.train_stage2_gs(ds, root / "depth.ckpt", cfg, out=root / "full.ckpt", snapshot_dir=root / "snaps")
    test = training.scene_samples(ds, "test")
    full_psnr = training.mean_psnr(training.evaluate(full.pipe, test))
    elapsed = time.perf_counter() - t0

    ablated = {}
    for name in ABLATIONS:
        res = training.train_stage2_gs(ds, root / "depth.ckpt", cfg.with_ablation(name))
        ablated[name] = training.mean_psnr(training.evaluate(res.pipe, test))
    return {
        "root": root, "ds": ds, "cfg": cfg, "stage1": stage1, "pipe": full.pipe, "test": test,
        "psnr": full_psnr, "elapsed": elapsed, "ablated": ablated, "snapshots": full.snapshots,
    }


# --------------------------------------------------------------------------- criteria


def test_criterion_1_rasterizer_matches_bruteforce_oracle():
    torch.set_num_threads(1)
    g = torch.Generator().manual_seed(SEED)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(25):
        n = int(torch.randint(1, 51, (), generator=g))
        cloud = random_cloud(1000 + i, n)
        cam = _random_camera(g)
        img = rasterize(cloud, cam, EXACT).double().numpy()
        m, q, sc, c, o = cloud_to_numpy(cloud)
        ref = render_bruteforce(
            m, q, sc, c, o, cam.K.double().numpy(), cam.R.double().numpy(), cam.t.double().numpy(),
            cam.width, cam.height, cam.near, cam.far, EXACT.eps2d, EXACT.alpha_min, EXACT.alpha_max, EXACT.background,
        )
        worst = max(worst, float(np.abs(img - ref).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30
    _report(1, "rasterizer oracle", ok, f"max diff {worst:.2e} (<= 1e-4), {elapsed:.1f} s (< 30 s)")
    assert ok


def test_criterion_2_gradients_match_finite_differences():
    torch.set_num_threads(1)
    s = RasterSettings()
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(10):
        g = torch.Generator().manual_seed(2000 + i)
        cam = _random_camera(g)
        cloud = random_cloud(2000 + i, 10 + i, dtype=torch.float64, spread=0.5)
        weights = torch.rand(32, 32, 3, generator=g, dtype=torch.float64)

        def loss(arrays):
            c = GaussianCloud(*(torch.from_numpy(a) for a in arrays))
            return float((rasterize(c, cam, s) * weights).sum())

        numeric = central_differences(loss, [a.copy() for a in cloud_to_numpy(cloud)], 1e-6)
        analytic = rasterize_backward(weights, *cloud.fields().values(), cam, s)
        for a, n in zip(analytic.values(), numeric):
            worst = max(worst, relative_error(a.numpy(), n))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-2 and elapsed < 120
    _report(2, "gradient finite differences", ok, f"max rel err {worst:.2e} (<= 1e-2), {elapsed:.1f} s (< 120 s)")
    assert ok


def test_criterion_3_single_scene_overfit(tmp_path):
    torch.set_num_threads(1)
    ds = Dataset(generate_dataset(tmp_path / "one", seed=SEED + 1, scenes=1, views=5, res=64))
    scene = ds.scene(ds.split("train")[0])
    res = training.overfit_scene(scene.images, scene.cameras, scene.depths, n_gaussians=4096, max_steps=5000)
    ok = len(res.cloud) == 4096 and res.best_psnr >= 30.0 and res.steps_run <= 5000
    _report(3, "single-scene overfit", ok, f"{res.best_psnr:.2f} dB (>= 30) after {res.steps_run} steps (<= 5000)")
    assert ok


def test_criterion_4_generalization(trained):
    test = trained["test"]
    mean_color = training.mean_color_psnr(test)
    torch.manual_seed(SEED)
    untrained = training.mean_psnr(training.evaluate(GSPipeline(trained["ds"].stats, trained["cfg"].pipeline_config()), test))
    got, elapsed = trained["psnr"], trained["elapsed"]
    ok = got >= mean_color + 6 and got >= untrained + 10 and elapsed <= 3600
    _report(
        4, "generalization", ok,
        f"held-out {got:.2f} dB vs mean-color {mean_color:.2f}+6 and untrained {untrained:.2f}+10; {elapsed / 60:.1f} min (<= 60)",
    )
    assert ok


def test_criterion_5_depth_stage(trained):
    pairs = training.depth_pairs(trained["test"])
    net = trained["stage1"].net
    err = training.depth_error(net, pairs, check_range=False)
    hi = float(np.exp(float(net.d_max)))
    in_range = True
    with torch.no_grad():
        for ref, src, cr, cs, _ in pairs:
            d = net(ref[None], src[None], [cr], [cs]).depth
            in_range &= bool(((d > 1) & (d < hi)).all())
    ok = err <= 0.05 and in_range
    _report(5, "depth stage", ok, f"held-out error {100 * err:.2f}% of range (<= 5%), range invariant {'holds' if in_range else 'VIOLATED'} on {len(pairs)} maps")
    assert ok


def test_criterion_6_ablation_ordering(trained):
    full, abl = trained["psnr"], trained["ablated"]
    ok = full >= abl["refine"] and full >= abl["feat_inp"] and abl["real_depth"] >= full - 0.5
    _report(
        6, "ablation ordering", ok,
        f"full {full:.2f} vs w/o refine {abl['refine']:.2f}, w/o feat_inp {abl['feat_inp']:.2f}; real depth {abl['real_depth']:.2f} (>= full-0.5)",
    )
    assert ok


def test_criterion_7_invariant_suites(trained, tmp_path):
    pipe, test = trained["pipe"], trained["test"]
    failures = []

    def check(name, cond):
        if not cond:
            failures.append(name)

    for sample in test[::4]:
        with torch.no_grad():
            img, pred = pipe.render_target(sample)
        for stage, cloud in (("regression", pred.raw_cloud), ("refinement", pred.cloud)):
            check(f"quaternion norm after {stage}", bool(((cloud.quats.norm(dim=-1) - 1).abs() < 1e-5).all()))
            check(f"scale > 0 after {stage}", bool((cloud.scales > 0).all()))
            check(f"opacity in (0,1) after {stage}", bool(((cloud.opacities > 0) & (cloud.opacities < 1)).all()))
        check("position pass-through", torch.equal(pred.cloud.means, pred.raw_cloud.means))
        rep = prediction_losses(img, sample.target_image, pred, 0.15)
        check("loss identity", float(rep.l_total) == float(rep.l_r + 0.15 * rep.l_recon))

    scene = trained["ds"].scene(trained["ds"].split("test")[0])
    cloud = encode_observation(ObservationBatch(scene.images, list(scene.cameras)), pipe, points=None)
    sub, again = downsample(cloud, 4096, seed=3), downsample(cloud, 4096, seed=3)
    check("downsample determinism", all(torch.equal(a, b) for a, b in zip(sub.fields().values(), again.fields().values())))
    rows = {tuple(r) for r in torch.cat([cloud.means, cloud.quats], 1).tolist()}
    check("downsample subset", len(sub) == 4096 and all(tuple(r) in rows for r in torch.cat([sub.means, sub.quats], 1).tolist()))

    pts = sub.means[:1500]
    check("knn exactness", build_knn(pts, k=16).neighbors.tolist() == knn_bruteforce(pts.double().numpy(), 16))

    export_ply(sub, tmp_path / "c.ply")
    back = import_ply(tmp_path / "c.ply")
    check("ply round trip", all(torch.equal(a, b) for a, b in zip(sub.fields().values(), back.fields().values())))

    ok = not failures
    _report(7, "invariant suites", ok, "all hold" if ok else "violated: " + ", ".join(sorted(set(failures))))
    assert ok


def test_criterion_8_sweep_points_harness(trained):
    root = trained["root"]
    report = root / "sweep_points.csv"
    code = main([
        "sweep-points", "--ckpt", str(root / "full.ckpt"), "--data", str(root / "data"),
        "--report", str(report), "--max-views", "2",
    ])
    rows = list(csv.DictReader(open(report))) if report.exists() else []
    sizes = sorted({(int(r["target"]), int(r["n_gaussians"])) for r in rows})
    expected = [(t, t) for t in SWEEP_TARGETS]
    ok = code == 0 and sizes == expected and len(rows) == len(SWEEP_TARGETS) * 3 * 2
    _report(8, "point-budget sweep", ok, f"{len(rows)} rows, sizes {sizes}")
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="the absolute-replacement refiner regenerates colors (mean ~0.1) for an all-black input it never saw in training",
)
def test_trained_black_scene_renders_near_black(trained):
    scene = trained["ds"].scene(trained["ds"].split("test")[0])
    black = type("S", (), {"images": torch.zeros_like(scene.images), "cameras": scene.cameras, "depths": scene.depths})()
    with torch.no_grad():
        img, _ = trained["pipe"].render_target(make_sample(black, 0))
    assert float(img.mean()) < 0.02


# --------------------------------------------------------------------------- supplementary trend checks


def test_stage1_window_loss_decreases(trained):
    losses = trained["stage1"].losses
    windows = [sum(losses[i : i + 100]) / 100 for i in range(0, len(losses) - 99, 100)]
    assert len(windows) >= 2
    assert all(b <= a for a, b in zip(windows, windows[1:])), windows


def test_opaque_prediction_reproduces_source_view(trained):
    pipe, scores = trained["pipe"], []
    for sample in trained["test"][::4]:
        with torch.no_grad():
            cloud = pipe.predict(sample).cloud
            hw = sample.target_image.shape[0] * sample.target_image.shape[1]
            own = cloud.subset(torch.arange(hw))
            opaque = GaussianCloud(own.means, own.quats, own.scales, own.colors, torch.full_like(own.opacities, 0.9999))
            scores.append(psnr(pipe.render(opaque, sample.source_cameras[0]), sample.source_images[0]))
    assert sum(scores) / len(scores) >= 25.0, scores


def test_snapshot_quality_trend(trained):
    psnrs = [training.mean_psnr(training.evaluate(training.load_pipeline(p), trained["test"])) for _, p in trained["snapshots"]]
    assert len(psnrs) == 4
    # non-decreasing on average: the mean successive change is >= 0
    assert psnrs[-1] >= psnrs[0], psnrs
