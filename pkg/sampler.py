"""
Latin hypercube generation of unit designs, feasibility filtering and
assembly of the labeled dataset
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import qmc

from config.config import GeometryConfig, PipelineConfig, SamplerConfig
from dynamics import required_torques
from errors import EmptyWorkspace, InvalidBounds, MissingColumns, NumericalError, Uncoverable
from geometry import (
    compute_scale_factor,
    compute_workspace,
    is_crank_rocker,
    is_feasible_over_range,
    kinematic_performance,
)
from schemas import ABS_LENGTH_NAMES, LENGTH_NAMES, LabeledDesign, MassModel, TaskRegion, UnitLinkage
from services.executor import parallel_map

logger = logging.getLogger(__name__)

DATASET_COLUMNS: List[str] = [
    "idx", *LENGTH_NAMES, "scale_m", *ABS_LENGTH_NAMES, "ws_area_m2", "eta", "tau1_nm", "tau2_nm",
]
FREE_VARIABLES: Tuple[str, ...] = LENGTH_NAMES[1:]


@dataclass
class DesignDataset:
    """Labeled rows plus the provenance needed to regenerate them"""
    rows: List[LabeledDesign]
    provenance: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.to_row() for row in self.rows], columns=DATASET_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, provenance: Optional[Dict] = None) -> "DesignDataset":
        missing = [col for col in DATASET_COLUMNS if col not in frame.columns]
        if missing:
            raise MissingColumns(f"Dataset is missing columns: {', '.join(missing)}")
        rows = [LabeledDesign.from_row(record) for record in frame.to_dict(orient="records")]
        return cls(rows=rows, provenance=provenance or {})

    @property
    def is_labeled(self) -> bool:
        return bool(self.rows) and all(row.tau1_nm is not None and row.tau2_nm is not None for row in self.rows)


# ==================== SAMPLING ====================

def lhs_sample(cfg: SamplerConfig) -> List[UnitLinkage]:
    """One sample per stratum for each free ratio; l1 is fixed to 1"""
    bounds = np.array(cfg.bounds.as_list(), dtype=float)
    if np.any(bounds[:, 0] >= bounds[:, 1]) or np.any(bounds <= 0):
        raise InvalidBounds(f"Sampling bounds must satisfy 0 < min < max, got {bounds.tolist()}")
    sampler = qmc.LatinHypercube(d=len(FREE_VARIABLES), seed=cfg.seed)
    values = qmc.scale(sampler.random(cfg.n_samples), bounds[:, 0], bounds[:, 1])
    logger.info(f"Drew {cfg.n_samples} LHS unit designs (seed={cfg.seed})")
    return [UnitLinkage(l1=1.0, **dict(zip(FREE_VARIABLES, row))) for row in values]


def _feasible_flag(args: Tuple[np.ndarray, int, float]) -> bool:
    lengths, grid, min_transmission_deg = args
    return is_crank_rocker(lengths) and is_feasible_over_range(lengths, grid, min_transmission_deg)


def filter_feasible(
    designs: Sequence[UnitLinkage],
    grid: int = 64,
    min_transmission_deg: float = 0.0,
    workers: Optional[int] = None,
) -> List[UnitLinkage]:
    """Designs that are crank-rockers and close over the whole operating range, order kept"""
    return [designs[i] for i in feasible_indices(designs, grid, min_transmission_deg, workers)]


def feasible_indices(
    designs: Sequence[UnitLinkage],
    grid: int = 64,
    min_transmission_deg: float = 0.0,
    workers: Optional[int] = None,
) -> List[int]:
    flags = parallel_map(
        _feasible_flag,
        [(d.as_array(), grid, min_transmission_deg) for d in designs],
        workers,
    )
    return [i for i, ok in enumerate(flags) if ok]


# ==================== LABELING ====================

def _kinematic_label(args) -> Dict:
    idx, lengths, task, geometry = args
    try:
        workspace = compute_workspace(lengths, geometry.grid, geometry.raster_cells)
        scale = compute_scale_factor(
            lengths,
            task,
            geometry.safety_factor,
            workspace=workspace,
            boundary_samples=geometry.boundary_samples,
            bracket=geometry.scale_bracket_m,
            rel_tol=geometry.scale_rel_tol,
            scan_steps=geometry.scale_scan_steps,
        )
    except Uncoverable:
        return {"idx": idx, "drop": "uncoverable"}
    except EmptyWorkspace:
        return {"idx": idx, "drop": "empty_workspace"}
    except NumericalError:
        return {"idx": idx, "drop": "numerical"}

    area = workspace.area * scale * scale
    eta = kinematic_performance(task.area, area)
    if eta > 1.0:
        return {"idx": idx, "drop": "eta_above_one"}
    return {"idx": idx, "scale_m": scale, "ws_area_m2": area, "eta": eta}


def label_kinematics(
    designs: Sequence[UnitLinkage],
    task: TaskRegion,
    geometry: GeometryConfig,
    indices: Optional[Sequence[int]] = None,
    workers: Optional[int] = None,
) -> Tuple[List[LabeledDesign], Counter]:
    """Covering scale, scaled workspace area and eta for each unit design"""
    indices = list(range(len(designs))) if indices is None else list(indices)
    results = parallel_map(
        _kinematic_label,
        [(idx, d.as_array(), task, geometry) for idx, d in zip(indices, designs)],
        workers,
    )
    rows: List[LabeledDesign] = []
    drops: Counter = Counter()
    seen = set()
    for design, result in zip(designs, results):
        if "drop" in result:
            drops[result["drop"]] += 1
            continue
        key = tuple(design.as_array())
        if key in seen:
            drops["duplicate"] += 1
            continue
        seen.add(key)
        rows.append(LabeledDesign(
            idx=result["idx"],
            unit=design,
            scale_m=result["scale_m"],
            ws_area_m2=result["ws_area_m2"],
            eta=result["eta"],
        ))
    if drops:
        logger.info(f"Kinematic labeling dropped {sum(drops.values())} designs: {dict(drops)}")
    return rows, drops


def _dynamic_label(args) -> Dict:
    lengths_abs, mass, grid = args
    try:
        label = required_torques(lengths_abs, mass, grid)
    except NumericalError as exc:
        return {"drop": type(exc).__name__}
    if not (np.isfinite(label.tau1) and np.isfinite(label.tau2)):
        return {"drop": "non_finite"}
    return {"tau1_nm": label.tau1, "tau2_nm": label.tau2}


def label_dynamics(
    rows: Sequence[LabeledDesign],
    mass: MassModel,
    grid: int = 64,
    workers: Optional[int] = None,
) -> Tuple[List[LabeledDesign], Counter]:
    """Append peak joint torques to kinematically labeled rows"""
    results = parallel_map(
        _dynamic_label,
        [(row.design.as_array(), mass, grid) for row in rows],
        workers,
    )
    labeled: List[LabeledDesign] = []
    drops: Counter = Counter()
    for row, result in zip(rows, results):
        if "drop" in result:
            drops[result["drop"]] += 1
            continue
        labeled.append(row.model_copy(update=result))
    if drops:
        logger.info(f"Torque labeling dropped {sum(drops.values())} designs: {dict(drops)}")
    return labeled, drops


def build_dataset(
    designs: Sequence[UnitLinkage],
    task: TaskRegion,
    payload: float,
    cfg: PipelineConfig,
    workers: Optional[int] = None,
) -> DesignDataset:
    """
    Label feasible unit designs for a task and payload

    Rows whose task cannot be covered or whose torques cannot be computed are
    dropped; the counts land in the provenance.
    """
    mass = cfg.mass.model_copy(update={"payload_kg": payload})
    rows, kinematic_drops = label_kinematics(designs, task, cfg.geometry, workers=workers)
    labeled, dynamic_drops = label_dynamics(rows, mass, cfg.geometry.grid, workers=workers)
    provenance = {
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.sampling.seed,
        "task": task.model_dump(mode="json"),
        "payload_kg": payload,
        "n_input": len(designs),
        "n_rows": len(labeled),
        "drops": dict(kinematic_drops + dynamic_drops),
    }
    return DesignDataset(rows=labeled, provenance=provenance)
