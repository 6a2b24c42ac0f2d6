"""
File repositories for the pipeline artifacts of one run directory
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from errors import DataError, MissingColumns
from moo import CONSTRAINT_NAMES, OBJECTIVE_NAMES, ParetoArchive, Population
from sampler import DesignDataset
from schemas import ABS_LENGTH_NAMES
from surrogate import SurrogateModel

logger = logging.getLogger(__name__)

# %.17g keeps every float64 bit through a CSV round trip
FLOAT_FORMAT = "%.17g"


def write_json(path: Path, payload) -> Path:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_json(path: Path) -> Dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"Missing artifact: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"Corrupt JSON in {path}: {exc}")


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"Missing artifact: {path}")


class DatasetRepository:
    """Dataset CSV plus its provenance sidecar"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def paths(self, name: str) -> Tuple[Path, Path]:
        return self.root / f"{name}.csv", self.root / f"{name}.provenance.json"

    def save(self, name: str, dataset: DesignDataset) -> List[Path]:
        csv_path, meta_path = self.paths(name)
        write_csv(csv_path, dataset.to_frame())
        write_json(meta_path, dataset.provenance)
        logger.info(f"Saved {len(dataset)} rows to {csv_path}")
        return [csv_path, meta_path]

    def load(self, name: str) -> DesignDataset:
        csv_path, meta_path = self.paths(name)
        provenance = read_json(meta_path) if meta_path.exists() else {}
        return DesignDataset.from_frame(read_csv(csv_path), provenance)

    def load_frame(self, name: str) -> pd.DataFrame:
        return read_csv(self.paths(name)[0])


class ModelRepository:
    """Self-describing surrogate JSON and its metrics"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.model_path = self.root / "model.json"
        self.metrics_path = self.root / "metrics.json"

    def save(self, model: SurrogateModel, metrics: Dict) -> List[Path]:
        write_json(self.model_path, model.to_dict())
        write_json(self.metrics_path, metrics)
        return [self.model_path, self.metrics_path]

    def load(self) -> SurrogateModel:
        return SurrogateModel.from_dict(read_json(self.model_path))

    def load_metrics(self) -> Dict:
        return read_json(self.metrics_path)


class ArchiveRepository:
    """Pareto CSV, per-generation history CSV and a JSON snapshot of the run settings"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.pareto_path = self.root / "pareto.csv"
        self.history_path = self.root / "history.csv"
        self.snapshot_path = self.root / "archive.json"

    def save(
        self,
        archive: ParetoArchive,
        pareto_frame: Optional[pd.DataFrame] = None,
        summary: Optional[Dict] = None,
    ) -> List[Path]:
        """`pareto_frame` may carry extra columns (truth re-evaluation) on top of the population frame"""
        names, objectives = list(ABS_LENGTH_NAMES), list(OBJECTIVE_NAMES)
        if pareto_frame is None:
            pareto_frame = archive.pareto.to_frame(names, objectives)
        write_csv(self.pareto_path, pareto_frame)
        history = pd.concat([pop.to_frame(names, objectives) for pop in archive.history], ignore_index=True)
        write_csv(self.history_path, history)
        write_json(self.snapshot_path, {
            "config": archive.config,
            "n_pareto": len(archive.pareto),
            "n_generations": len(archive.history),
            "summary": summary or {},
        })
        logger.info(f"Saved {len(archive.pareto)} Pareto designs and {len(archive.history)} generations")
        return [self.pareto_path, self.history_path, self.snapshot_path]

    @staticmethod
    def _population(frame: pd.DataFrame, generation: int) -> Population:
        missing = [c for c in (*ABS_LENGTH_NAMES, *OBJECTIVE_NAMES, "rank", "crowding") if c not in frame.columns]
        if missing:
            raise MissingColumns(f"Archive is missing columns: {', '.join(missing)}")
        constraint_cols = [c for c in CONSTRAINT_NAMES if c in frame.columns]
        return Population(
            generation=generation,
            X=frame[list(ABS_LENGTH_NAMES)].to_numpy(dtype=float),
            F=frame[list(OBJECTIVE_NAMES)].to_numpy(dtype=float),
            G=frame[constraint_cols].to_numpy(dtype=float),
            rank=frame["rank"].to_numpy(dtype=int),
            crowding=frame["crowding"].to_numpy(dtype=float),
        )

    def load(self) -> ParetoArchive:
        pareto_frame = read_csv(self.pareto_path)
        history_frame = read_csv(self.history_path)
        snapshot = read_json(self.snapshot_path)
        generation = int(pareto_frame["generation"].iloc[0]) if len(pareto_frame) else 0
        history = [
            self._population(group.reset_index(drop=True), int(gen))
            for gen, group in history_frame.groupby("generation", sort=True)
        ]
        return ParetoArchive(
            pareto=self._population(pareto_frame, generation),
            history=history,
            config=snapshot.get("config", {}),
        )

    def load_pareto_frame(self) -> pd.DataFrame:
        return read_csv(self.pareto_path)


class ReportRepository:
    """JSON, CSV and text outputs under one directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def json(self, name: str, payload) -> Path:
        return write_json(self.root / name, payload)

    def csv(self, name: str, frame: pd.DataFrame) -> Path:
        return write_csv(self.root / name, frame)

    def text(self, name: str, content: str) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content)
        return path

    def read_json(self, name: str) -> Dict:
        return read_json(self.root / name)

    def read_text(self, name: str) -> str:
        path = self.root / name
        if not path.exists():
            raise DataError(f"Missing artifact: {path}")
        return path.read_text()

    def save_all(self, outputs: Dict[str, object]) -> List[Path]:
        """Dispatch by extension: .json (dict/model), .csv (DataFrame), anything else text"""
        written: List[Path] = []
        for name in sorted(outputs):
            payload = outputs[name]
            if name.endswith(".csv"):
                written.append(self.csv(name, payload))
            elif name.endswith(".json"):
                written.append(self.json(name, payload))
            else:
                written.append(self.text(name, payload))
        return written


def frame_columns(frame: pd.DataFrame, names: Sequence[str]) -> np.ndarray:
    missing = [c for c in names if c not in frame.columns]
    if missing:
        raise MissingColumns(f"Missing columns: {', '.join(missing)}")
    return frame[list(names)].to_numpy(dtype=float)
