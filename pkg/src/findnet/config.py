"""JSON run configurations (unknown keys are rejected)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import ctsim
from .model import FindNetConfig
from .training import FitConfig, LossWeights, OptimizerState, ScheduleConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Paths(_Strict):
    data: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None


class GeometrySection(_Strict):
    size: int = Field(64, ge=8)
    n_angles: int = Field(96, ge=1)
    n_dets: int = Field(96, ge=1)
    spacing: float = Field(1.0, gt=0)
    fov_cm: float = Field(20.0, gt=0)


class PhantomSection(_Strict):
    n_ellipses: int = Field(6, ge=0)


class MetalSection(_Strict):
    count: int = Field(2, ge=0)
    radius_range: tuple[float, float] = (1.0, 4.5)
    value: float = Field(2.5, ge=ctsim.METAL_THRESHOLD)

    @model_validator(mode="after")
    def _radii(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius_range must satisfy 0 < lo <= hi")
        return self


class CorruptionSection(_Strict):
    beta: float = Field(0.3, ge=0)
    noise_scale: float = Field(1.0, ge=0)


class SplitsSection(_Strict):
    train: int = Field(200, ge=0)
    val: int = Field(20, ge=0)
    test: int = Field(50, ge=0)


class GenerateConfig(_Strict):
    seed: int = 0
    paths: Paths = Paths()
    geometry: GeometrySection = GeometrySection()
    phantom: PhantomSection = PhantomSection()
    metal: MetalSection = MetalSection()
    corruption: CorruptionSection = CorruptionSection()
    splits: SplitsSection = SplitsSection()

    def sample_config(self) -> ctsim.SampleConfig:
        g = self.geometry
        return ctsim.SampleConfig(
            phantom=ctsim.PhantomConfig(g.size, g.size, self.phantom.n_ellipses,
                                        ctsim.MetalConfig(self.metal.count,
                                                          tuple(self.metal.radius_range),
                                                          self.metal.value)),
            geometry=ctsim.Geometry(g.n_angles, g.n_dets, g.spacing),
            corruption=ctsim.Corruption(self.corruption.beta, self.corruption.noise_scale),
            fov_cm=g.fov_cm)


class ModelSection(_Strict):
    stages: int = Field(10, ge=1)
    n_kernels: int = Field(8, ge=1)
    kernel_size: int = Field(9, ge=1)
    width: int = Field(16, ge=1)
    blocks: int = Field(2, ge=0)
    use_gaussian: bool = True
    lfu_gaussian: bool = True
    alpha_zero: bool = False
    m_init: str = "net"
    eta1_init: float = Field(0.1, gt=0)
    eta2_init: float = Field(0.5, gt=0, lt=1)

    def build(self) -> FindNetConfig:
        return FindNetConfig(**self.model_dump())


class LossSection(_Strict):
    omega: Optional[list[float]] = None
    omega_intermediate: float = Field(0.1, ge=0)
    omega_final: float = Field(1.0, gt=0)
    gamma1: float = Field(5e-4, ge=0)
    gamma2: float = Field(5e-4, ge=0)

    def build(self, stages: int) -> LossWeights:
        if self.omega is not None:
            if len(self.omega) != stages + 1:
                raise ConfigError("loss.omega", f"needs {stages + 1} entries")
            return LossWeights(list(self.omega), self.gamma1, self.gamma2)
        return LossWeights.default(stages, self.omega_intermediate, self.omega_final,
                                   self.gamma1, self.gamma2)


class OptimizerSection(_Strict):
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(10.0, ge=0)


class ScheduleSection(_Strict):
    warmup_steps: int = Field(100, ge=0)
    total_steps: Optional[int] = Field(None, ge=1)
    min_lr_fraction: float = Field(0.0, ge=0, le=1)


class TrainConfig(_Strict):
    seed: int = 0
    paths: Paths = Paths()
    geometry: Optional[GeometrySection] = None
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    optimizer: OptimizerSection = OptimizerSection()
    schedule: ScheduleSection = ScheduleSection()
    epochs: int = Field(200, ge=1)
    patience: int = Field(10, ge=1)
    min_delta: float = Field(1e-6, ge=0)
    max_train_samples: Optional[int] = Field(None, ge=1)

    def fit_config(self, n_train: int) -> FitConfig:
        total = self.schedule.total_steps or self.epochs * n_train
        warm = min(self.schedule.warmup_steps, total - 1)
        o = self.optimizer
        return FitConfig(
            epochs=self.epochs, patience=self.patience, min_delta=self.min_delta,
            clip_norm=o.clip_norm, seed=self.seed,
            schedule=ScheduleConfig(warm, total, self.schedule.min_lr_fraction),
            optimizer=OptimizerState(o.lr, o.weight_decay, o.beta1, o.beta2, o.eps),
            loss=self.loss.build(self.model.stages))


class EvalConfig(_Strict):
    seed: int = 0
    paths: Paths = Paths()
    split: str = "test"
    model: str = "checkpoint"


class GradcheckConfig(_Strict):
    seed: int = 0
    paths: Paths = Paths()
    size: int = Field(16, ge=8)
    stages: int = Field(2, ge=1)
    coords_per_tensor: int = Field(2, ge=1)
    tolerance: float = Field(1e-4, gt=0)
    full_model: bool = True


def parse(cls, data: dict):
    """Validate ``data`` into ``cls``; raises ConfigError naming the first bad key."""
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(key, err["msg"]) from None


def load(cls, path):
    if path is None:
        return cls()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    return parse(cls, data)


def dump(cfg) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
