"""
Resource Management Utilities
Atomic file writes, canonical JSON and run directories.

Every artifact a run leaves behind (checkpoints, resolved configs, metric
JSON, CSV dumps) goes through SafeFileWriter, so a crash never leaves a
half-written file under its final name.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class SafeFileWriter:
    """
    Write to a temp file beside the target, then `os.replace` it into place.

    Example:
        with SafeFileWriter("run/resolved_config.json") as f:
            json.dump(data, f)
    """

    def __init__(self, target_path: PathLike, mode: str = "w", encoding: str = "utf-8"):
        """
        Args:
            target_path: final destination; missing parent directories are created
            mode: "w" (text) or "wb" (binary)
            encoding: text encoding, ignored in binary mode
        """
        if mode not in ("w", "wb"):
            raise ValueError(f"SafeFileWriter mode must be 'w' or 'wb', got '{mode}'")
        self.target_path = Path(target_path)
        self.mode = mode
        self.encoding = encoding if "b" not in mode else None
        self.temp_path = None
        self.file_handle = None

    def __enter__(self):
        self.target_path.parent.mkdir(parents=True, exist_ok=True)
        fd, self.temp_path = tempfile.mkstemp(
            dir=self.target_path.parent,
            prefix=f".{self.target_path.name}.",
            suffix=".tmp",
        )
        if "b" in self.mode:
            self.file_handle = os.fdopen(fd, self.mode)
        else:
            self.file_handle = os.fdopen(fd, self.mode, encoding=self.encoding, newline="")
        return self.file_handle

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.file_handle:
            if exc_type is None:
                self.file_handle.flush()
                os.fsync(self.file_handle.fileno())
            self.file_handle.close()

        if exc_type is None and self.temp_path:
            try:
                os.replace(self.temp_path, self.target_path)
            except OSError:
                if os.path.exists(self.temp_path):
                    os.unlink(self.temp_path)
                raise
        elif self.temp_path and os.path.exists(self.temp_path):
            os.unlink(self.temp_path)
            logger.debug(f"Discarded partial write to {self.target_path}")
        return False


def dumps_json(data) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path: PathLike, data) -> Path:
    with SafeFileWriter(path) as f:
        f.write(dumps_json(data))
    return Path(path)


def write_bytes(path: PathLike, payload: bytes) -> Path:
    with SafeFileWriter(path, mode="wb") as f:
        f.write(payload)
    return Path(path)


def read_json(path: PathLike):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def ensure_run_dir(path: PathLike) -> Path:
    run_dir = Path(path)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir
