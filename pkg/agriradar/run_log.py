"""Training logs and run manifests."""

from __future__ import annotations

import json
import logging
import os
import platform
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Optional, TextIO

import numpy as np

from . import __version__
from .errors import AgriRadarError

log = logging.getLogger(__name__)


class RunLogError(AgriRadarError):
    """Raised when a run log or manifest cannot be created."""
    pass


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


class RunLogger:
    """
    Line-delimited JSON log of one training run.

    Creates ``<name>_YYYY-MM-DD_HH-MM-SS.jsonl`` in ``log_dir`` unless an explicit
    ``path`` is given. Every record is flushed as soon as it is written.
    """

    def __init__(self, log_dir: str = "./runs", name: str = "train", path: Optional[str] = None):
        """
        Initialize the run logger.

        Args:
            log_dir: Directory for timestamped log files.
            name: File name prefix.
            path: Exact log file path; overrides ``log_dir`` and ``name``.
        """
        self._log_dir = Path(log_dir)
        self._name = name
        self._explicit = Path(path) if path else None
        self._file: Optional[TextIO] = None
        self._filepath: Optional[Path] = None
        self.records = 0

    @property
    def filepath(self) -> Optional[Path]:
        """Get the current log file path."""
        return self._filepath

    def start(self, **fields) -> Path:
        """
        Open the log and write a start marker.

        Args:
            **fields: Extra fields for the start marker (seed, config hash...).

        Returns:
            Path to the created log file.

        Raises:
            RunLogError: If the log file cannot be created.
        """
        try:
            if self._explicit is not None:
                self._filepath = self._explicit
            else:
                timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
                self._filepath = self._log_dir / f"{self._name}_{timestamp}.jsonl"
            self._filepath.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self._filepath, "w", encoding="utf-8")
        except OSError as e:
            raise RunLogError(f"Failed to create run log: {e}") from e
        self._write({"event": "start", "time": datetime.now().isoformat(), **fields})
        return self._filepath

    def stop(self, **fields) -> None:
        """Write an end marker and close the file."""
        if self._file is not None:
            try:
                self._write({"event": "end", "time": datetime.now().isoformat(),
                             "records": self.records, **fields})
                self._file.close()
            except Exception:
                pass  # Ignore errors during close
            finally:
                self._file = None

    def record(self, **fields) -> None:
        """Append one record, e.g. ``record(step=3, loss=0.25)``."""
        if self._file is None:
            return
        self.records += 1
        self._write(fields)

    def _write(self, entry: dict) -> None:
        if self._file is not None:
            try:
                self._file.write(json.dumps(entry, default=_jsonable) + "\n")
                self._file.flush()
            except Exception:
                pass  # Don't crash on log write failure

    def __enter__(self) -> RunLogger:
        self.start()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.stop()


def read_run_log(path: str) -> list[dict]:
    """All records of a run log, markers included."""
    try:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, ValueError) as e:
        raise RunLogError(f"Failed to read run log {path}: {e}") from e


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """What a subcommand read, wrote and how long each stage took."""
    command: str
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.versions:
            self.versions = {
                "agriradar": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            }

    def add_timing(self, stage: str, milliseconds: float) -> None:
        if milliseconds < 0:
            raise RunLogError(f"Negative timing for {stage}")
        self.timings_ms[stage] = float(milliseconds)

    @contextmanager
    def timed(self, stage: str) -> Iterator[None]:
        """Record the wall time of the enclosed block under ``stage``."""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.add_timing(stage, (time.perf_counter() - start) * 1e3)


def write_manifest(path: Path, manifest: RunManifest) -> Path:
    """Write the manifest atomically (temporary file then rename)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest_", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(asdict(manifest), f, indent=2, sort_keys=True, default=_jsonable)
            f.write("\n")
        os.replace(tmp, path)
    except OSError as e:
        raise RunLogError(f"Failed to write manifest {path}: {e}") from e
    return path


def read_manifest(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise RunLogError(f"Failed to read manifest {path}: {e}") from e


@contextmanager
def manifest_scope(path: Path, manifest: RunManifest) -> Iterator[RunManifest]:
    """
    Yield ``manifest`` and write it when the block exits.

    An exception escaping the block is stored in the ``error`` field before
    the manifest is written, then re-raised.
    """
    try:
        yield manifest
    except BaseException as e:
        manifest.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        try:
            write_manifest(path, manifest)
        except RunLogError as e:
            log.error("%s", e)
