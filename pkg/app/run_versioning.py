#!/usr/bin/env python3
"""
Run directory versioning for GPRG
Every command writes into a fresh versioned directory; the latest completed
run of each command is tracked by an atomically replaced pointer file.
"""

import os
import json
import shutil
from pathlib import Path
from typing import Any, Dict, Optional
from datetime import datetime, timezone
import logging

logger = logging.getLogger(__name__)


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class RunDirectoryManager:
    """Manages versioned run directories for one subcommand"""

    def __init__(self, command: str, base_dir: str = "runs", keep_count: int = 20):
        self.command = command
        self.base_dir = Path(base_dir)
        self.command_dir = self.base_dir / command
        self.command_dir.mkdir(parents=True, exist_ok=True)
        self.keep_count = keep_count

        self.version_file = self.command_dir / "current_version.json"
        self.lock_file = self.command_dir / "build.lock"

    def get_current_version(self) -> Optional[str]:
        """Get the most recently completed run version"""
        if self.version_file.exists():
            try:
                with open(self.version_file, 'r') as f:
                    return json.load(f).get('version')
            except (OSError, ValueError):
                return None
        return None

    def is_running(self) -> bool:
        return self.lock_file.exists()

    def start_run(self, config_hash: str) -> str:
        """Create the run directory and take the lock; returns the version name"""
        if self.is_running():
            logger.warning(f"Stale or concurrent lock found at {self.lock_file}; taking it over")

        with open(self.lock_file, 'w') as f:
            json.dump({
                'started_at': _utcnow().isoformat(),
                'process_id': os.getpid()
            }, f)

        timestamp = _utcnow().strftime("%Y%m%d_%H%M%S")
        version = f"v{timestamp}_{config_hash[:8]}"
        suffix = 1
        while (self.command_dir / version).exists():
            suffix += 1
            version = f"v{timestamp}_{config_hash[:8]}_{suffix}"

        (self.command_dir / version).mkdir(parents=True)
        return version

    def complete_run(self, version: str, run_metadata: Dict[str, Any]) -> Path:
        """Write meta.json, move the pointer to this run, release the lock"""
        run_dir = self.get_version_path(version)
        if not run_dir.exists():
            raise ValueError(f"Run directory {version} does not exist")

        metadata = {
            'version': version,
            'command': self.command,
            'completed_at': _utcnow().isoformat(),
            **run_metadata
        }
        with open(run_dir / "meta.json", 'w') as f:
            json.dump(metadata, f, indent=2, sort_keys=True, default=str)

        temp_version_file = self.version_file.with_suffix('.tmp')
        with open(temp_version_file, 'w') as f:
            json.dump({
                'version': version,
                'path': str(run_dir),
                'updated_at': _utcnow().isoformat()
            }, f)
        temp_version_file.replace(self.version_file)

        self._release_lock()
        self._cleanup_old_versions()
        logger.info(f"Run {version} of '{self.command}' completed")
        return run_dir

    def abort_run(self, version: Optional[str] = None, keep_files: bool = True):
        """Release the lock; failed runs are kept for inspection unless told otherwise"""
        if version and not keep_files:
            run_dir = self.command_dir / version
            if run_dir.exists():
                shutil.rmtree(run_dir)
        self._release_lock()

    def get_version_path(self, version: Optional[str] = None) -> Path:
        """Path of a run directory (latest completed if version=None)"""
        if version is None:
            version = self.get_current_version()
            if not version:
                raise ValueError(f"No completed '{self.command}' run available")
        return self.command_dir / version

    def _release_lock(self):
        if self.lock_file.exists():
            self.lock_file.unlink()

    def _cleanup_old_versions(self):
        """Remove old runs, keeping the most recent ones"""
        try:
            run_dirs = [d for d in self.command_dir.iterdir() if d.is_dir() and d.name.startswith('v')]
            run_dirs.sort(key=lambda d: d.stat().st_mtime, reverse=True)
            for old in run_dirs[self.keep_count:]:
                shutil.rmtree(old)
                logger.info(f"Cleaned up old run: {old.name}")
        except OSError as e:
            logger.warning(f"Error cleaning up old runs: {e}")
