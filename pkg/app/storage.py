from __future__ import annotations

import csv
import json
import logging
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def fmt_float(value: Any) -> Any:
    """Full round-trip precision for floats, everything else unchanged"""
    if isinstance(value, float):
        return f"{value:.17g}"
    return value


class RunStore:
    """Artifact writer for one run directory"""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._log_handler: Optional[logging.Handler] = None
        self.artifacts: List[str] = []

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def _record(self, name: str) -> Path:
        with self._lock:
            if name not in self.artifacts:
                self.artifacts.append(name)
        return self.path(name)

    # JSON
    def write_json(self, name: str, payload: Any) -> Path:
        target = self._record(name)
        with open(target, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        return target

    def read_json(self, name: str) -> Any:
        with open(self.path(name)) as f:
            return json.load(f)

    # CSV
    def write_rows(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self._record(name)
        with open(target, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt_float(v) for v in row])
        return target

    def claim(self, name: str) -> Path:
        """Path for an artifact written by another module's writer"""
        return self._record(name)

    # Logs
    def attach_log(self, level: int = logging.INFO) -> Path:
        """Mirror the root logger into run.log for the lifetime of the run"""
        target = self._record("run.log")
        handler = logging.FileHandler(target)
        handler.setLevel(level)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        self._log_handler = handler
        return target

    def detach_log(self):
        if self._log_handler is not None:
            logging.getLogger().removeHandler(self._log_handler)
            self._log_handler.close()
            self._log_handler = None

    def manifest(self) -> Dict[str, Any]:
        return {"run_dir": str(self.run_dir), "artifacts": sorted(self.artifacts)}
