"""
Utility Functions

This module provides helper functions for logging set-up, seeding, hashing and
JSON-lines files shared by every stage.
"""

import hashlib
import json
import os
import random
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from . import config


def setup_logging(output_dir: Optional[Union[str, Path]] = None, level: str = "INFO") -> None:
    """
    Configure loguru sinks for a command invocation.

    A DEBUG file sink is written into output_dir (when given) and a console
    sink goes through tqdm.write so progress bars stay intact.

    Parameters:
    -----------
    output_dir : str or Path, optional
        Directory receiving ma2mi.log
    level : str
        Console log level (default: INFO)
    """
    logger.remove()

    if output_dir is not None:
        log_dir = Path(output_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_dir / "ma2mi.log",
            rotation="100 MB",
            retention="10 days",
            level="DEBUG",
            format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"
        )

    logger.add(
        lambda msg: tqdm.write(msg, end=""),
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}",
        level=level,
        colorize=True
    )


def deterministic_requested() -> bool:
    """Whether MA2MI_DETERMINISTIC=1 is set in the environment."""
    return os.environ.get(config.DETERMINISTIC_ENV, "0") == "1"


def seed_everything(seed: int, deterministic: Optional[bool] = None) -> None:
    """
    Seed python, numpy and torch RNGs and optionally force deterministic kernels.

    Parameters:
    -----------
    seed : int
        Base seed
    deterministic : bool, optional
        Force deterministic algorithms (defaults to the MA2MI_DETERMINISTIC switch)
    """
    if deterministic is None:
        deterministic = deterministic_requested()

    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)

    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":16:8")
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
        torch.use_deterministic_algorithms(True)
        logger.debug(f"Deterministic kernels enabled (seed={seed})")


def derive_seed(*parts: Any) -> int:
    """
    Derive a stable 63-bit seed from arbitrary parts.

    Examples:
    ---------
    >>> derive_seed(0, "epoch", 3) == derive_seed(0, "epoch", 3)
    True
    """
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def canonical_json(data: Any) -> str:
    """Serialize with sorted keys and no whitespace so equal trees hash equally."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def content_hash(data: Any, length: int = 16) -> str:
    """Short SHA-256 hex digest of a JSON-serializable tree."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:length]


def file_sha256(path: Union[str, Path]) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_jsonl(path: Union[str, Path], rows: Iterable[Dict[str, Any]]) -> int:
    """
    Write rows as JSON-lines, replacing the file.

    Returns:
    --------
    int
        Number of rows written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
            count += 1
    return count


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Read every non-empty line of a JSON-lines file."""
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(path: Union[str, Path], data: Any) -> None:
    """Write pretty JSON, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def read_json(path: Union[str, Path]) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


class JsonlLog:
    """
    Append-only JSON-lines training log.

    One object per line; floats are written as plain JSON numbers. The log is
    opened lazily and flushed after each record so an interrupted run keeps
    every completed step.
    """

    def __init__(self, path: Union[str, Path], append: bool = False):
        """
        Parameters:
        -----------
        path : str or Path
            Log file location
        append : bool
            Keep existing lines (used when resuming)
        """
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append and self.path.exists():
            self.path.unlink()

    def write(self, record: Dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")

    def __iter__(self) -> Iterator[Dict[str, Any]]:
        if not self.path.exists():
            return iter(())
        return iter(read_jsonl(self.path))


def resolve_device(name: Optional[str] = None) -> torch.device:
    """The requested device, else CUDA when available, else CPU."""
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")
