"""
Error Tracker

This module records training failures (non-finite losses) as timestamped JSON
dumps so a diverged run can be diagnosed after it aborts.
"""

import json
import math
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from loguru import logger

from . import config


class TrainingFailureTracker:
    """
    Collects failed training steps and persists each one to disk.

    One file per failure is written into the diagnostics directory:
    failed_step_<timestamp>.json with the step, the loss components and the
    clip ids of the offending batch.
    """

    def __init__(self, output_dir: Path):
        """
        Initialize failure tracker.

        Parameters:
        -----------
        output_dir : Path
            Run directory; dumps go to its diagnostics/ subdirectory
        """
        self.diagnostics_dir = Path(output_dir) / config.DIAGNOSTICS_DIR
        self.failures: List[Dict[str, Any]] = []

    def record_failure(
        self,
        step: int,
        components: Dict[str, float],
        clip_ids: Sequence[str],
        stage: str = "pretrain",
        epoch: Optional[int] = None
    ) -> Optional[Path]:
        """
        Record a failed step and write its dump.

        Parameters:
        -----------
        step : int
            Global step that produced the non-finite loss
        components : dict
            Loss components of the step (non-finite values are stored as strings)
        clip_ids : sequence of str
            Clips in the batch
        stage : str
            "pretrain" or "finetune"

        Returns:
        --------
        Path or None
            The dump file, or None when it could not be written
        """
        entry = {
            "stage": stage,
            "step": step,
            "epoch": epoch,
            "components": {k: (v if math.isfinite(v) else str(v)) for k, v in components.items()},
            "clip_ids": list(clip_ids),
        }
        self.failures.append(entry)

        timestamp = time.strftime('%Y%m%d_%H%M%S')
        filepath = self.diagnostics_dir / f"failed_step_{timestamp}.json"
        try:
            self.diagnostics_dir.mkdir(parents=True, exist_ok=True)
            with open(filepath, 'w') as f:
                json.dump({"timestamp": timestamp, **entry}, f, indent=2)
            logger.error(f"Non-finite loss at {stage} step {step}; diagnostics saved to {filepath}")
            return filepath
        except OSError as e:
            logger.error(f"Failed to save failure diagnostics: {e}")
            return None

    def get_failed_count(self) -> int:
        return len(self.failures)

    def clear(self) -> None:
        """Clear all tracked failures."""
        self.failures.clear()
