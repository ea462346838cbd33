"""
Run failure notifier - records each failed sweep run once per day.
"""
import json
import logging
import traceback
from datetime import datetime
from pathlib import Path
from typing import Optional, Set, Union

logger = logging.getLogger(__name__)


class RunFailureNotifier:
    """Appends sweep run failures to failures.jsonl, one entry per run per day"""

    FILENAME = "failures.jsonl"

    def __init__(self, out_dir: Union[str, Path]):
        self.path = Path(out_dir) / self.FILENAME
        self._sent: Set[str] = set()
        try:
            if self.path.exists():
                with open(self.path, "r", encoding="utf-8") as f:
                    for line in f:
                        if line.strip():
                            self._sent.add(json.loads(line).get("unique_by", ""))
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Could not read previous failures from %s: %s", self.path, e)

    def notify_run_failure(self, run_id: str, error: BaseException,
                           details: Optional[dict] = None) -> bool:
        """
        Record a failed run.
        Uses the run id with today's date as the unique key, so repeated
        failures of one run on one day are recorded once.

        Args:
            run_id: Failed run
            error: The exception that ended it
            details: Optional extra fields (axis value, seed, dump)

        Returns:
            True if the failure was written, False if it was a duplicate or
            could not be written
        """
        today = datetime.now().strftime("%Y-%m-%d")
        unique_key = f"run_failure_{run_id}_{today}"
        if unique_key in self._sent:
            logger.info("Failure for run %s already recorded today", run_id)
            return False

        entry = {
            "unique_by": unique_key,
            "run_id": run_id,
            "error_type": type(error).__name__,
            "message": str(error),
            "traceback": "".join(traceback.format_exception_only(type(error), error)).strip(),
        }
        dump = getattr(error, "dump", None)
        if dump:
            entry["dump"] = dump
        if details:
            entry["details"] = details

        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        except OSError as e:
            logger.error("Failed to record failure for run %s: %s", run_id, e)
            return False
        self._sent.add(unique_key)
        logger.warning("Run %s failed: %s: %s", run_id, entry["error_type"], entry["message"])
        return True
