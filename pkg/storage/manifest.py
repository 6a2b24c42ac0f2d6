"""
Run manifest: which stage produced which file, with content hashes
"""
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

from config.config import settings
from errors import DataError, IncompleteManifest
from schemas import FileRecord, RunManifest, StageRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ManifestRepository:
    """Reads and writes `manifest.json` inside a run directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.path = self.root / MANIFEST_NAME

    def load(self) -> RunManifest:
        if not self.path.exists():
            return RunManifest(software_version=settings.SOFTWARE_VERSION)
        try:
            return RunManifest.model_validate_json(self.path.read_text())
        except ValueError as exc:
            raise DataError(f"Corrupt manifest {self.path}: {exc}")

    def save(self, manifest: RunManifest) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = manifest.model_dump(mode="json")
        self.path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def record(self, path: Union[str, Path]) -> FileRecord:
        try:
            relative = Path(path).resolve().relative_to(self.root.resolve())
        except ValueError:
            raise DataError(f"{path} is outside the run directory {self.root}")
        return FileRecord(path=relative.as_posix(), sha256=sha256_file(self.root / relative))

    def require(self, stage: str, manifest: Optional[RunManifest] = None) -> StageRecord:
        """
        Stage record whose files still hash-match what was recorded

        Raises:
            IncompleteManifest: stage never ran in this directory
            DataError: a recorded file is missing or was modified
        """
        manifest = manifest or self.load()
        if stage not in manifest.stages:
            raise IncompleteManifest(f"Stage '{stage}' has not been run in {self.root}")
        record = manifest.stages[stage]
        for key, entry in record.files.items():
            path = self.root / entry.path
            if not path.exists():
                raise DataError(f"Output '{key}' of stage '{stage}' is missing: {path}")
            if sha256_file(path) != entry.sha256:
                raise DataError(f"Output '{key}' of stage '{stage}' changed since it was recorded: {path}")
        return record

    def input_path(self, stage: str, key: str, manifest: Optional[RunManifest] = None) -> Path:
        record = self.require(stage, manifest)
        if key not in record.files:
            raise IncompleteManifest(f"Stage '{stage}' recorded no '{key}' output")
        return self.root / record.files[key].path


class StageRun:
    """Collects what a stage reads and writes while it runs"""

    def __init__(self, repository: ManifestRepository, stage: str, seed: Optional[int]):
        self.repository = repository
        self.stage = stage
        self.seed = seed
        self.outputs: Dict[str, Path] = {}
        self.inputs: Dict[str, FileRecord] = {}
        self.stats: Dict[str, float] = {}

    def use(self, stage: str, key: str) -> Path:
        """Resolve an upstream output and remember its hash as an input of this stage"""
        path = self.repository.input_path(stage, key)
        self.inputs[f"{stage}.{key}"] = self.repository.record(path)
        return path

    def output(self, key: str, path: Union[str, Path]) -> None:
        self.outputs[key] = Path(path)

    def outputs_from(self, paths: List[Path]) -> None:
        for path in paths:
            self.output(Path(path).name, path)


@contextmanager
def stage_run(
    repository: ManifestRepository,
    stage: str,
    config_sha256: str,
    seed: Optional[int] = None,
) -> Iterator[StageRun]:
    """
    Record a stage in the manifest if, and only if, its body finishes

    Usage:
        with stage_run(repo, "train", cfg.digest(), seed) as run:
            run.output("model", path)
    """
    run = StageRun(repository, stage, seed)
    started = time.perf_counter()
    try:
        yield run
    except Exception:
        logger.exception(f"Stage '{stage}' failed; manifest left unchanged")
        raise
    elapsed = time.perf_counter() - started
    manifest = repository.load()
    manifest.software_version = settings.SOFTWARE_VERSION
    manifest.config_sha256 = config_sha256
    manifest.stages[stage] = StageRecord(
        files={key: repository.record(path) for key, path in run.outputs.items()},
        inputs=run.inputs,
        seconds=round(elapsed, 3),
        seed=seed,
        stats=run.stats,
    )
    repository.save(manifest)
    logger.info(f"Stage '{stage}' recorded in {repository.path} ({elapsed:.1f}s)")
