"""Training configuration: nested dataclasses loaded from TOML or JSON.

Example (TOML)::

    seed = 0
    lambda = 0.15
    stage = "gs_train"          # or "depth_pretrain"

    [stage1]
    steps = 800

    [stage2]
    steps = 2000
    snapshot_fracs = [0.14, 0.38, 0.6, 1.0]

    [regressor]
    use_feature_input = true

    [pipeline]
    use_refinement = true
    depth_source = "predicted"   # or "ground_truth"

    [refine]
    residual = false
"""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .pipeline import DEPTH_SOURCES, PipelineConfig
from .rasterizer import RasterSettings

STAGES = ("depth_pretrain", "gs_train")


@dataclass
class Stage1Config:
    steps: int = 800
    batch: int = 4
    lr: float = 1e-3
    eval_every: int = 200


@dataclass
class Stage2Config:
    steps: int = 1000
    batch: int = 1
    lr: float = 5e-4
    snapshot_fracs: tuple[float, ...] = (0.14, 0.38, 0.6, 1.0)


@dataclass
class RegressorConfig:
    use_feature_input: bool = True


@dataclass
class PipelineSection:
    use_refinement: bool = True
    depth_source: str = "predicted"


@dataclass
class RefineConfig:
    residual: bool = False
    k: int = 16


@dataclass
class DepthConfig:
    n_planes: int = 32


@dataclass
class RenderConfig:
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class TrainConfig:
    seed: int = 0
    lam: float = 0.15
    stage: str = "gs_train"
    points: int = 8192
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    refine: RefineConfig = field(default_factory=RefineConfig)
    depth: DepthConfig = field(default_factory=DepthConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def validate(self) -> "TrainConfig":
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.pipeline.depth_source not in DEPTH_SOURCES:
            raise ConfigError(f"pipeline.depth_source must be one of {DEPTH_SOURCES}")
        if self.stage1.steps < 0 or self.stage2.steps < 0:
            raise ConfigError("step budgets must be >= 0")
        if self.stage1.batch < 1 or self.stage2.batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.depth.n_planes < 2:
            raise ConfigError("depth.n_planes must be >= 2")
        if self.points < 1:
            raise ConfigError("points must be >= 1")
        if any(not 0 < f <= 1 for f in self.stage2.snapshot_fracs):
            raise ConfigError("snapshot fractions must lie in (0, 1]")
        return self

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            use_feature_input=self.regressor.use_feature_input,
            use_refinement=self.pipeline.use_refinement,
            depth_source=self.pipeline.depth_source,
            refine_residual=self.refine.residual,
            knn_k=self.refine.k,
            n_planes=self.depth.n_planes,
            raster=RasterSettings(
                alpha_min=self.render.alpha_min,
                transmittance_min=self.render.transmittance_min,
                background=tuple(self.render.background),
            ),
        )

    def with_ablation(self, ablation: Optional[str]) -> "TrainConfig":
        """Copy with one Table-IV style switch flipped: feat_inp, refine or real_depth."""
        cfg = dataclasses.replace(
            self,
            regressor=dataclasses.replace(self.regressor),
            pipeline=dataclasses.replace(self.pipeline),
        )
        if ablation is None:
            return cfg
        if ablation == "feat_inp":
            cfg.regressor.use_feature_input = False
        elif ablation == "refine":
            cfg.pipeline.use_refinement = False
        elif ablation == "real_depth":
            cfg.pipeline.depth_source = "ground_truth"
        else:
            raise ConfigError(f"unknown ablation {ablation!r}")
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _fill(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a table")
    kwargs: dict[str, Any] = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        name = "lam" if (cls is TrainConfig and key == "lambda") else key
        if name not in fields:
            raise ConfigError(f"unknown config key {where + key!r}")
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _fill(sub, value, f"{where}{key}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(data: dict) -> TrainConfig:
    return _fill(TrainConfig, data, "").validate()


def load_config(path: Union[str, Path, None]) -> TrainConfig:
    """Read a TOML (``.toml``) or JSON file; ``None`` gives the defaults."""
    if path is None:
        return TrainConfig().validate()
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)
