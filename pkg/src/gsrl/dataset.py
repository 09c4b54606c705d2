"""On-disk multiview dataset: per-scene PNG views, PFM depths, camera and depth statistics.

Layout::

    root/
      stats.json          {"d_max", "depth_min", "depth_max"} over every scene
      splits.json         {"train": [...], "val": [...], "test": [...]}
      scene_0000/
        view_000.png ...  8-bit RGB
        depth_000.pfm ... float32 little-endian z-depth
        cameras.json      {"views": [{"K", "R", "t", "width", "height"}, ...]}
        stats.json        per-scene depth statistics
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

from .camera import Camera
from .errors import DatasetError
from .scenes import SceneSpec, SyntheticScene, generate_scene

PathLike = Union[str, Path]


def write_pfm(path: PathLike, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom-to-top)."""
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", raw)
    if m is None:
        raise DatasetError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < count * 4:
        raise DatasetError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape)[::-1].copy()


def write_png(path: PathLike, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def read_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def depth_stats(depths) -> dict:
    d_hi = float(max(float(np.max(d)) for d in depths))
    d_lo = float(min(float(np.min(d)) for d in depths))
    return {"d_max": math.log(d_hi), "depth_min": d_lo, "depth_max": d_hi}


def write_scene(scene: SyntheticScene, directory: PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (img, depth) in enumerate(zip(scene.images.numpy(), scene.depths.numpy())):
        write_png(directory / f"view_{i:03d}.png", img)
        write_pfm(directory / f"depth_{i:03d}.pfm", depth)
    cams = {"views": [c.to_dict() for c in scene.cameras]}
    (directory / "cameras.json").write_text(json.dumps(cams, indent=1))
    (directory / "stats.json").write_text(json.dumps(depth_stats(scene.depths.numpy()), indent=1))


@dataclass
class SceneData:
    name: str
    images: torch.Tensor  # [V, H, W, 3]
    cameras: list[Camera]
    depths: Optional[torch.Tensor] = None  # [V, H, W]

    def __len__(self) -> int:
        return len(self.cameras)


def load_scene(directory: PathLike, with_depth: bool = True) -> SceneData:
    directory = Path(directory)
    cam_file = directory / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"{directory}: missing cameras.json")
    views = json.loads(cam_file.read_text())["views"]
    cams = [Camera.from_dict(v) for v in views]
    images = []
    depths = []
    for i in range(len(cams)):
        png = directory / f"view_{i:03d}.png"
        if not png.exists():
            raise DatasetError(f"{directory}: missing {png.name}")
        images.append(read_png(png))
        pfm = directory / f"depth_{i:03d}.pfm"
        if with_depth and pfm.exists():
            depths.append(read_pfm(pfm))
    depth_t = None
    if with_depth and len(depths) == len(cams):
        depth_t = torch.from_numpy(np.stack(depths))
    return SceneData(directory.name, torch.from_numpy(np.stack(images)), cams, depth_t)


def split_counts(n_train: int) -> tuple[int, int]:
    """Validation and test scene counts: 10% of the training count each, at least one."""
    k = max(1, round(0.1 * n_train))
    return k, k


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(
    out: PathLike,
    seed: int = 0,
    scenes: int = 30,
    views: int = 8,
    res: int = 64,
    spec: Optional[SceneSpec] = None,
) -> Path:
    out = Path(out)
    spec = spec or SceneSpec()
    spec.n_views, spec.res = views, res
    n_val, n_test = split_counts(scenes)
    names = [f"scene_{i:04d}" for i in range(scenes + n_val + n_test)]
    all_depths = []
    for i, name in enumerate(names):
        scene = generate_scene(scene_seed(seed, i), spec)
        write_scene(scene, out / name)
        all_depths.append(scene.depths.numpy())
    splits = {
        "train": names[:scenes],
        "val": names[scenes:scenes + n_val],
        "test": names[scenes + n_val:],
    }
    (out / "splits.json").write_text(json.dumps(splits, indent=1))
    (out / "stats.json").write_text(json.dumps(depth_stats(all_depths), indent=1))
    return out


class Dataset:
    """Lazy, cached access to a generated dataset directory."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        try:
            self.splits = json.loads((self.root / "splits.json").read_text())
            self.stats = json.loads((self.root / "stats.json").read_text())
        except FileNotFoundError as exc:
            raise DatasetError(f"{self.root}: not a dataset ({exc.filename} missing)") from None
        for key in ("d_max", "depth_min", "depth_max"):
            if key not in self.stats:
                raise DatasetError(f"stats.json lacks {key!r}")
        self._cache: dict[str, SceneData] = {}

    def scene(self, name: str) -> SceneData:
        if name not in self._cache:
            self._cache[name] = load_scene(self.root / name)
        return self._cache[name]

    def split(self, which: str) -> list[str]:
        if which not in self.splits:
            raise DatasetError(f"unknown split {which!r}")
        return list(self.splits[which])
