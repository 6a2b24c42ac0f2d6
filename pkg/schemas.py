"""
Domain models shared by the pipeline stages
"""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

LENGTH_NAMES: Tuple[str, ...] = ("l1", "l2", "l3", "l4", "eex", "eey")
ABS_LENGTH_NAMES: Tuple[str, ...] = tuple(f"{name}_abs" for name in LENGTH_NAMES)
TARGET_NAMES: Tuple[str, ...] = ("eta", "tau1_nm", "tau2_nm")


class UnitLinkage(BaseModel):
    """Link lengths of a unit mechanism, as ratios to the frame length"""
    l1: float = Field(1.0, gt=0)
    l2: float = Field(..., gt=0)
    l3: float = Field(..., gt=0)
    l4: float = Field(..., gt=0)
    eex: float = Field(..., gt=0)
    eey: float = Field(..., gt=0)

    model_config = ConfigDict(frozen=True)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in LENGTH_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "UnitLinkage":
        return cls(**{name: float(v) for name, v in zip(LENGTH_NAMES, values)})


class JointAngles(BaseModel):
    """Frame angle theta1 and crank angle theta2, in radians"""
    theta1: float
    theta2: float

    model_config = ConfigDict(frozen=True)

    @classmethod
    def from_degrees(cls, theta1: float, theta2: float) -> "JointAngles":
        return cls(theta1=math.radians(theta1), theta2=math.radians(theta2))

    def in_operating_range(self) -> bool:
        lo1, hi1 = math.radians(45.0), math.radians(180.0)
        lo2 = math.radians(-37.5)
        tol = 1e-12
        return (lo1 - tol <= self.theta1 <= hi1 + tol) and (lo2 - tol <= self.theta2 <= self.theta1 + tol)


class TaskRegion(BaseModel):
    """Disk enclosing every point the manipulator has to reach (meters)

    A single task point gives a zero radius; stages that need a task area reject it.
    """
    center: Tuple[float, float]
    radius: float = Field(..., ge=0)

    model_config = ConfigDict(frozen=True)

    @property
    def area(self) -> float:
        return math.pi * self.radius ** 2

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        dist = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
        return dist <= self.radius * (1.0 + tol) + tol


class ScaledDesign(BaseModel):
    """Unit mechanism multiplied by the absolute frame length `scale` (meters)"""
    unit: UnitLinkage
    scale: float = Field(..., gt=0)

    model_config = ConfigDict(frozen=True)

    @property
    def lengths_abs(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in self.unit.as_array() * self.scale)

    def as_array(self) -> np.ndarray:
        return self.unit.as_array() * self.scale

    @classmethod
    def from_lengths(cls, lengths_abs: Sequence[float]) -> "ScaledDesign":
        values = np.asarray(lengths_abs, dtype=float)
        scale = float(values[0])
        return cls(unit=UnitLinkage.from_array(values / scale), scale=scale)


class MassModel(BaseModel):
    """Uniform-rod link masses plus a tip payload

    Zero density or payload is accepted so unloaded and link-only cases can be
    evaluated; a negative gravity value flips the load direction.
    """
    density_kg_m3: float = Field(1040.0, ge=0)
    section_area_m2: float = Field(6e-4, gt=0)
    payload_kg: float = Field(5.0, ge=0)
    gravity_m_s2: float = 9.81

    model_config = ConfigDict(extra="forbid", frozen=True)


class TorqueLabel(BaseModel):
    """Peak absolute joint torques over the operating range (N·m)"""
    tau1: float = Field(..., gt=0)
    tau2: float = Field(..., gt=0)


class LabeledDesign(BaseModel):
    """One dataset row: a unit design, its covering scale and its labels"""
    idx: int = Field(..., ge=0)
    unit: UnitLinkage
    scale_m: float = Field(..., gt=0)
    ws_area_m2: float = Field(..., gt=0)
    eta: float = Field(..., gt=0, le=1)
    tau1_nm: Optional[float] = Field(None, gt=0)
    tau2_nm: Optional[float] = Field(None, gt=0)

    @property
    def design(self) -> ScaledDesign:
        return ScaledDesign(unit=self.unit, scale=self.scale_m)

    def to_row(self) -> Dict[str, Optional[float]]:
        row: Dict[str, Optional[float]] = {"idx": self.idx}
        row.update({name: getattr(self.unit, name) for name in LENGTH_NAMES})
        row["scale_m"] = self.scale_m
        row.update({name: value for name, value in zip(ABS_LENGTH_NAMES, self.design.lengths_abs)})
        row["ws_area_m2"] = self.ws_area_m2
        row["eta"] = self.eta
        row["tau1_nm"] = self.tau1_nm
        row["tau2_nm"] = self.tau2_nm
        return row

    @classmethod
    def from_row(cls, row: Dict) -> "LabeledDesign":
        def _opt(value):
            if value is None or (isinstance(value, float) and math.isnan(value)):
                return None
            return float(value)

        return cls(
            idx=int(row["idx"]),
            unit=UnitLinkage(**{name: float(row[name]) for name in LENGTH_NAMES}),
            scale_m=float(row["scale_m"]),
            ws_area_m2=float(row["ws_area_m2"]),
            eta=float(row["eta"]),
            tau1_nm=_opt(row.get("tau1_nm")),
            tau2_nm=_opt(row.get("tau2_nm")),
        )


# ==================== SURROGATE ====================

class MlpHyperparams(BaseModel):
    """Network shape and optimizer settings"""
    hidden_layers: int = Field(1, ge=1)
    hidden_nodes: int = Field(100, ge=1)
    activation: str = Field("relu", pattern="^relu$")
    optimizer: str = Field("adam", pattern="^adam$")
    learning_rate: float = Field(1e-3, gt=0)
    max_epochs: int = Field(50_000, ge=1)
    patience: int = Field(500, ge=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    log_every: int = Field(5_000, ge=1)

    model_config = ConfigDict(extra="forbid")


class TargetMetrics(BaseModel):
    r2: float
    mse: float = Field(..., ge=0)
    rmse: float = Field(..., ge=0)


class RegressionMetrics(BaseModel):
    """R², MSE and RMSE on min-max normalized targets"""
    per_target: Dict[str, TargetMetrics]
    aggregate: TargetMetrics
    n_rows: int


# ==================== MINING ====================

class SobolIndices(BaseModel):
    S1: List[float]
    S1_conf: List[float]
    ST: List[float]
    ST_conf: List[float]
    negative_flags: List[bool]


class SobolReport(BaseModel):
    variables: List[str]
    objectives: Dict[str, SobolIndices]
    base_n: int
    n_evaluations: int
    seed: int


class TreeNode(BaseModel):
    """CART regression tree node; leaves have no split"""
    depth: int
    n_samples: int
    value: float
    feature: Optional[str] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def max_depth(self) -> int:
        if self.is_leaf:
            return self.depth
        return max(self.left.max_depth(), self.right.max_depth())

    def predict_one(self, sample: Dict[str, float]) -> float:
        node = self
        while not node.is_leaf:
            node = node.left if sample[node.feature] <= node.threshold else node.right
        return node.value


TreeNode.model_rebuild()


class CorrelationPair(BaseModel):
    variable: str
    objective: str
    pearson_r: Optional[float]
    pearson_p: Optional[float]
    spearman_rho: Optional[float]
    spearman_p: Optional[float]
    pearson_significant: bool
    spearman_significant: bool


class CorrelationReport(BaseModel):
    alpha: float
    n_samples: int
    pairs: List[CorrelationPair]

    def get(self, variable: str, objective: str) -> CorrelationPair:
        for pair in self.pairs:
            if pair.variable == variable and pair.objective == objective:
                return pair
        raise KeyError(f"No correlation for ({variable}, {objective})")


# ==================== RUN MANIFEST ====================

class FileRecord(BaseModel):
    path: str
    sha256: str


class StageRecord(BaseModel):
    files: Dict[str, FileRecord] = Field(default_factory=dict)
    inputs: Dict[str, FileRecord] = Field(default_factory=dict)
    seconds: float = Field(0.0, ge=0)
    seed: Optional[int] = None
    stats: Dict[str, float] = Field(default_factory=dict)


class RunManifest(BaseModel):
    """Stage outputs with content hashes, timings and seeds"""
    software_version: str
    config_sha256: str = ""
    stages: Dict[str, StageRecord] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_stages(self) -> "RunManifest":
        unknown = set(self.stages) - {"generate", "label", "train", "optimize", "mine", "report"}
        if unknown:
            raise ValueError(f"Unknown stages in manifest: {sorted(unknown)}")
        return self


class VariableDistribution(BaseModel):
    """Box-plot summary of one partial derivative across designs"""
    variable: str
    mean_abs: float
    mean: float
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float


class DerivativeReport(BaseModel):
    step_rel: float
    n_designs: int
    n_skipped: int
    variables: List[VariableDistribution]

    def ranking(self) -> List[str]:
        """Variables by decreasing mean |d eta / dx|"""
        return [v.variable for v in sorted(self.variables, key=lambda v: v.mean_abs, reverse=True)]


class RuleCheck(BaseModel):
    rule: str
    passed: bool
    detail: Dict[str, object] = Field(default_factory=dict)
