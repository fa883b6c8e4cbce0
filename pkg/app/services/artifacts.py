"""
Artifact registry for one output directory.

Every file a stage writes is recorded with its sha256 and the hash of the
config that produced it, so later stages can find their inputs and `report`
can refuse to combine artifacts of different runs.
"""
import hashlib
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from ..database import database_url, get_db, init_db
from ..exceptions import ConfigError, MissingArtifactError
from ..models.artifact import Artifact, PipelineRun

logger = logging.getLogger(__name__)

session_scope = contextmanager(get_db)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _as_dict(artifact: Artifact) -> Dict[str, str]:
    return {
        "name": artifact.name,
        "stage": artifact.stage,
        "sha256": artifact.sha256,
        "config_hash": artifact.config_hash,
    }


class ArtifactRegistry:
    def __init__(self, output_dir, config_hash: str, url: Optional[str] = None):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.engine = init_db(url or database_url(self.output_dir))
        self.run_id: Optional[int] = None

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def start_run(self, stage: str, seed: int) -> int:
        with session_scope(self.engine) as db:
            run = PipelineRun(stage=stage, config_hash=self.config_hash, seed=seed)
            db.add(run)
            db.commit()
            self.run_id = run.id
        logger.info(f"Run {self.run_id}: {stage} (config {self.config_hash[:12]})")
        return self.run_id

    def record(self, stage: str, name: str) -> str:
        """Register (or re-register) an artifact written by `stage`; returns its sha256."""
        sha = file_sha256(self.path(name))
        with session_scope(self.engine) as db:
            artifact = db.query(Artifact).filter(Artifact.name == name).first()
            if artifact is None:
                artifact = Artifact(name=name)
                db.add(artifact)
            artifact.stage = stage
            artifact.sha256 = sha
            artifact.config_hash = self.config_hash
            artifact.run_id = self.run_id
            db.commit()
        logger.info(f"Wrote {name} ({sha[:12]})")
        return sha

    def lookup(self, name: str) -> Optional[Dict[str, str]]:
        with session_scope(self.engine) as db:
            artifact = db.query(Artifact).filter(Artifact.name == name).first()
            return None if artifact is None else _as_dict(artifact)

    def require(self, name: str, producer: str) -> Path:
        """Path of an upstream artifact; raises naming the producing subcommand when absent."""
        path = self.path(name)
        if not path.exists():
            raise MissingArtifactError(name, producer)
        entry = self.lookup(name)
        if entry is not None and entry["config_hash"] != self.config_hash:
            logger.warning(f"{name} was produced by config {entry['config_hash'][:12]}, not {self.config_hash[:12]}")
        return path

    def check_consistent(self, names: Iterable[str]) -> Dict[str, str]:
        """Config hash of every registered artifact in `names`; raises if they differ."""
        hashes = {}
        for name in names:
            entry = self.lookup(name)
            if entry is not None and self.path(name).exists():
                hashes[name] = entry["config_hash"]
        distinct = sorted(set(hashes.values()))
        if len(distinct) > 1:
            detail = ", ".join(f"{name}={h[:12]}" for name, h in sorted(hashes.items()))
            raise ConfigError(f"artifacts come from different configs: {detail}")
        return hashes

    def all_artifacts(self) -> List[Dict[str, str]]:
        with session_scope(self.engine) as db:
            return [_as_dict(a) for a in db.query(Artifact).order_by(Artifact.name).all()]
