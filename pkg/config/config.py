"""
Configuration for the quasi-serial mechanism design pipeline

Process-level knobs come from the environment (Settings); everything that
shapes a run lives in a versioned YAML file validated by PipelineConfig.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError, InvalidBounds
from geometry import min_enclosing_circle
from schemas import MassModel, MlpHyperparams, TaskRegion

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings from environment variables"""

    # Service info
    SERVICE_NAME: str = "quasi-serial-design"
    SOFTWARE_VERSION: str = "1.0.0"

    # Parallel labeling (1 = run inline)
    WORKERS: int = 1

    # Default output directory when --out is not given
    OUTPUT_DIR: str = "runs/latest"

    # Logging
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore"
    )


settings = Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskConfig(_Section):
    """Explicit disk, or a point list reduced to its minimum enclosing circle"""
    center_m: Optional[Tuple[float, float]] = (-0.6, 0.6)
    radius_m: Optional[float] = Field(0.05, gt=0)
    points_m: Optional[List[Tuple[float, float]]] = None

    def region(self) -> TaskRegion:
        if self.points_m:
            region = min_enclosing_circle(self.points_m)
            if region.radius <= 0:
                raise ConfigError("task.points_m: points are coincident, the task disk has no area")
            return region
        if self.center_m is None or self.radius_m is None:
            raise ConfigError("task: either points_m or both center_m and radius_m are required")
        return TaskRegion(center=self.center_m, radius=self.radius_m)


class BoundsConfig(_Section):
    """Sampling ranges of the free unit-design ratios (l1 is fixed to 1)"""
    l2: Tuple[float, float] = (0.18, 0.6)
    l3: Tuple[float, float] = (0.8, 1.3)
    l4: Tuple[float, float] = (0.3, 0.6)
    eex: Tuple[float, float] = (1.0, 1.4)
    eey: Tuple[float, float] = (0.2, 0.7)

    @model_validator(mode="after")
    def _ordered(self) -> "BoundsConfig":
        for name in ("l2", "l3", "l4", "eex", "eey"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi):
                raise ValueError(f"{name} bounds must satisfy 0 < min < max, got [{lo}, {hi}]")
        return self

    def as_list(self) -> List[Tuple[float, float]]:
        return [self.l2, self.l3, self.l4, self.eex, self.eey]


class GeometryConfig(_Section):
    grid: int = Field(64, ge=4)
    raster_cells: int = Field(256, ge=16)
    boundary_samples: int = Field(256, ge=8)
    min_transmission_angle_deg: float = Field(48.0, ge=0, lt=90)
    scale_bracket_m: Tuple[float, float] = (0.01, 100.0)
    scale_rel_tol: float = Field(1e-4, gt=0)
    scale_scan_steps: int = Field(1000, ge=2)
    safety_factor: float = Field(1.0, ge=1)

    @field_validator("scale_bracket_m")
    @classmethod
    def _bracket(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not (0 < value[0] < value[1]):
            raise ValueError("scale_bracket_m must satisfy 0 < min < max")
        return value


class SamplerConfig(_Section):
    """Latin hypercube settings for unit designs"""
    n_samples: int = Field(40_000, gt=0)
    seed: int = 20230901
    bounds: BoundsConfig = Field(default_factory=BoundsConfig)
    max_uncoverable_fraction: float = Field(0.99, gt=0, le=1)


class TrainingConfig(_Section):
    hyperparams: MlpHyperparams = Field(default_factory=MlpHyperparams)
    split_ratio: float = Field(0.8, gt=0, lt=1)
    split_seed: int = 11
    init_seed: int = 12


class OptimizationConfig(_Section):
    pop_size: int = Field(100, ge=4)
    generations: int = Field(200, ge=1)
    seed: int = 21
    z_value: float = Field(1.95, gt=0)
    crossover_eta: float = Field(15.0, gt=0)
    crossover_prob: float = Field(0.9, ge=0, le=1)
    mutation_eta: float = Field(20.0, gt=0)
    mutation_prob: Optional[float] = Field(None, ge=0, le=1)

    @field_validator("pop_size")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("pop_size must be even")
        return value


class MiningConfig(_Section):
    sobol_base_n: int = Field(1024, ge=2)
    sobol_seed: int = 31
    bootstrap_resamples: int = Field(100, ge=1)
    tree_max_depth: int = Field(3, ge=1)
    tree_min_samples_leaf: int = Field(5, ge=1)
    tree_seed: int = 32
    n_pareto: int = Field(100, ge=1)
    n_history: int = Field(300, ge=0)
    neighborhood_seed: int = 33
    alpha: float = Field(0.05, gt=0, lt=1)
    derivative_step_rel: float = Field(1e-3, gt=0, lt=0.1)
    derivative_designs: int = Field(200, ge=1)
    derivative_seed: int = 34
    polar_phi_samples: int = Field(2048, ge=16)
    polar_levels: int = Field(512, ge=16)

    @field_validator("sobol_base_n")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError("sobol_base_n must be a power of 2")
        return value


class ReportConfig(_Section):
    envelope_mm: Optional[Tuple[float, float, float]] = (600.0, 350.0, 350.0)
    max_rows: int = Field(10, ge=1)


class PipelineConfig(_Section):
    """Full run configuration; every field defaults to the reference setup"""
    config_version: int = 1
    task: TaskConfig = Field(default_factory=TaskConfig)
    sampling: SamplerConfig = Field(default_factory=SamplerConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    mass: MassModel = Field(default_factory=MassModel)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    optimization: OptimizationConfig = Field(default_factory=OptimizationConfig)
    mining: MiningConfig = Field(default_factory=MiningConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    output_dir: Optional[str] = None

    @field_validator("config_version")
    @classmethod
    def _supported_version(cls, value: int) -> int:
        if value != 1:
            raise ValueError(f"unsupported config_version {value}")
        return value

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def with_seed(self, stage: str, seed: Optional[int]) -> "PipelineConfig":
        """Copy with the seed(s) of one stage replaced"""
        if seed is None:
            return self
        data = self.model_dump()
        if stage == "generate":
            data["sampling"]["seed"] = seed
        elif stage == "train":
            data["training"]["split_seed"] = seed
            data["training"]["init_seed"] = seed + 1
        elif stage == "optimize":
            data["optimization"]["seed"] = seed
        elif stage == "mine":
            for key in ("sobol_seed", "tree_seed", "neighborhood_seed", "derivative_seed"):
                data["mining"][key] = seed
        return PipelineConfig.model_validate(data)


def _format_location(loc) -> str:
    return ".".join(str(part) for part in loc)


def parse_pipeline_config(data: Optional[dict]) -> PipelineConfig:
    """Validate a raw mapping, raising ConfigError that names the bad key"""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = _format_location(first["loc"]) or "<root>"
        message = f"invalid config key '{key}': {first['msg']}"
        if "bounds" in key:
            raise InvalidBounds(message) from exc
        raise ConfigError(message) from exc


def load_pipeline_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Load a YAML pipeline config; no path means all defaults"""
    if path is None:
        logger.info("No config file given, using defaults")
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    config = parse_pipeline_config(data)
    logger.info(f"Loaded pipeline config from {path}")
    return config
