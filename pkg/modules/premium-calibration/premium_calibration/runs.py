"""Run directory management, atomic file writes and checkpoint documents."""

import datetime
import json
import logging
import os
import shutil
import tempfile
import uuid
from enum import Enum
from pathlib import Path
from typing import Any

from .errors import ConsistencyError
from .errors import InputError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "premium-calibration-checkpoint"
CHECKPOINT_VERSION = 1


class StageStatus(str, Enum):
    """Progress of one pipeline stage within a run."""

    PENDING = "pending"
    COMPLETED = "completed"
    FAILED = "failed"


def atomic_write_text(path: Path, text: str) -> None:
    """Write ``text`` to a temporary file next to ``path`` and rename it into place.

    Readers see either the old file or the complete new one, never a partial write.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def atomic_write_json(path: Path, document: dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(document, indent=2, ensure_ascii=False) + "\n")


def read_json(path: Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"Invalid JSON in {path}: {e}") from e


def generate_run_id() -> str:
    """Run id of the form ``{span}-{timestamp}_calibration``.

    Example: 7cc787dd22d54f6c-20251118-114317_calibration
    """
    span_id = uuid.uuid4().hex[:16]
    timestamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    return f"{span_id}-{timestamp}_calibration"


def save_checkpoint(path: Path, kind: str, payload: dict[str, Any]) -> None:
    """Write a self-describing checkpoint document atomically."""
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "written": datetime.datetime.now().isoformat(),
        **payload,
    }
    atomic_write_json(path, document)
    logger.info(f"Checkpoint '{kind}' written to {path}")


def load_checkpoint(path: Path, kind: str) -> dict[str, Any]:
    """Read a checkpoint and check it is of the expected kind.

    Raises:
        InputError: if the file is missing or not a checkpoint.
        ConsistencyError: if it holds a different kind of checkpoint.
    """
    document = read_json(path)
    if document.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a calibration checkpoint")
    if document.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {document.get('version')}")
    if document.get("kind") != kind:
        raise ConsistencyError(f"{path} holds a '{document.get('kind')}' checkpoint, expected '{kind}'")
    return document


class RunManager:
    """Manages run directories and their persisted ``state.json``."""

    def __init__(self, base_dir: Path, auto_cleanup_days: int = 30):
        """
        Initialize run manager.

        Args:
            base_dir: Directory holding one sub-directory per run
            auto_cleanup_days: Delete runs older than N days on cleanup
        """
        self.base_dir = Path(base_dir).expanduser()
        self.auto_cleanup_days = auto_cleanup_days

    def get_run_dir(self, run_id: str) -> Path:
        return self.base_dir / run_id

    def create_run(self, stages: list[str], config: dict[str, Any], config_path: Path | None = None) -> str:
        """
        Create a new run directory and its initial state.

        Args:
            stages: Stage names the run will execute, in order
            config: Effective configuration, echoed into the state
            config_path: Optional config file copied into the run directory

        Returns:
            run_id: Unique run identifier
        """
        run_id = generate_run_id()
        run_dir = self.get_run_dir(run_id)
        run_dir.mkdir(parents=True, exist_ok=True)

        if config_path and Path(config_path).exists():
            shutil.copy2(config_path, run_dir / "config.yaml")

        state = {
            "run_id": run_id,
            "started": datetime.datetime.now().isoformat(),
            "stages": {name: StageStatus.PENDING.value for name in stages},
            "completed_stages": [],
            "outputs": {},
            "config": config,
        }
        self.save_state(run_id, state)
        logger.info(f"Created run {run_id} in {run_dir}")
        return run_id

    def save_state(self, run_id: str, state: dict[str, Any]) -> None:
        atomic_write_json(self.get_run_dir(run_id) / "state.json", state)

    def load_state(self, run_id: str) -> dict[str, Any]:
        state_file = self.get_run_dir(run_id) / "state.json"
        if not state_file.exists():
            raise InputError(f"Run state not found: {run_id}")
        return read_json(state_file)

    def run_exists(self, run_id: str) -> bool:
        return (self.get_run_dir(run_id) / "state.json").exists()

    def mark_stage(self, run_id: str, stage: str, status: StageStatus, outputs: dict[str, str] | None = None) -> None:
        """Record a stage's status and any output paths it produced."""
        state = self.load_state(run_id)
        state["stages"][stage] = status.value
        if status == StageStatus.COMPLETED and stage not in state["completed_stages"]:
            state["completed_stages"].append(stage)
        if outputs:
            state["outputs"].update(outputs)
        state["updated"] = datetime.datetime.now().isoformat()
        self.save_state(run_id, state)

    def completed_stages(self, run_id: str) -> list[str]:
        return list(self.load_state(run_id).get("completed_stages", []))

    def list_runs(self) -> list[dict[str, Any]]:
        """
        List all runs under the base directory, newest first.

        Returns list of run info dicts with:
        - run_id
        - started
        - completed_stages
        """
        if not self.base_dir.exists():
            return []

        runs = []
        for run_dir in self.base_dir.iterdir():
            state_file = run_dir / "state.json"
            if not state_file.exists():
                continue
            try:
                state = read_json(state_file)
            except InputError:
                # Skip corrupted runs
                continue
            runs.append(
                {
                    "run_id": state.get("run_id", run_dir.name),
                    "started": state.get("started"),
                    "completed_stages": state.get("completed_stages", []),
                }
            )

        runs.sort(key=lambda r: r.get("started") or "", reverse=True)
        return runs

    def cleanup_old_runs(self) -> int:
        """
        Delete runs older than auto_cleanup_days.

        Returns number of runs deleted.
        """
        cutoff = datetime.datetime.now() - datetime.timedelta(days=self.auto_cleanup_days)
        deleted = 0
        for info in self.list_runs():
            started = info.get("started")
            if not started:
                continue
            if datetime.datetime.fromisoformat(started) < cutoff:
                shutil.rmtree(self.get_run_dir(info["run_id"]))
                deleted += 1
        if deleted:
            logger.info(f"Removed {deleted} runs older than {self.auto_cleanup_days} days")
        return deleted
