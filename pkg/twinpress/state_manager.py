import json
import logging
import os
import threading
from contextlib import contextmanager
from typing import Any, Dict, List, Optional

from twinpress.errors import ConfigurationError, RunIOError
from twinpress.metrics import CostReport

MANIFEST_NAME = "run_state.json"
ROLES = ("candidate", "baseline")


class RunStateManager:
    """
    Manages the manifest of a run directory.

    The manifest is a JSON store recording the files each subcommand produced,
    the cost ledgers of its phases, and which ledgers the report compares as
    candidate and baseline. Access is serialized with a lock, and every
    mutation is written back when its scope exits.

    Attributes:
        lock (threading.Lock): Guards read-modify-write cycles
        store_file (str): Path to the manifest file
    """

    def __init__(self, run_dir: str):
        """
        Initialize the manager for a run directory.

        Args:
            run_dir (str): Directory holding the run outputs; created if missing
        """
        self.lock = threading.Lock()
        self.run_dir = run_dir
        self.store_file = os.path.join(run_dir, MANIFEST_NAME)
        logging.debug(f"RunStateManager initialized with store file: {self.store_file}")

    @contextmanager
    def store_scope(self):
        """
        Context manager for atomic manifest operations.

        Loads the current manifest, yields it for modification and saves it
        when the block exits without error.

        Yields:
            dict: The current manifest contents

        Raises:
            RunIOError: If the manifest cannot be read or written
        """
        try:
            if os.path.exists(self.store_file):
                with open(self.store_file, "r", encoding="utf-8") as f:
                    store = json.load(f)
            else:
                store = {}

            yield store

            os.makedirs(self.run_dir, exist_ok=True)
            with open(self.store_file, "w", encoding="utf-8", newline="\n") as f:
                json.dump(store, f, indent=2, sort_keys=True)
                f.write("\n")
            logging.debug("Manifest saved successfully")
        except (OSError, ValueError) as e:
            logging.error("Error in manifest operation", exc_info=True)
            raise RunIOError(f"cannot update {self.store_file}: {e}") from e

    def set(self, key: str, data: Any) -> Any:
        with self.lock:
            with self.store_scope() as store:
                store[key] = data
                logging.debug(f"Updated manifest key: {key}")
                return data

    def _read_store(self) -> Dict[str, Any]:
        try:
            with open(self.store_file, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, ValueError) as e:
            raise RunIOError(f"cannot read {self.store_file}: {e}") from e

    def get(self, key: str) -> Any:
        if not os.path.exists(self.store_file):
            return None
        with self.lock:
            return self._read_store().get(key)

    def add_files(self, command: str, files: List[str]) -> None:
        """Record files produced by a subcommand, relative to the run directory."""
        with self.lock:
            with self.store_scope() as store:
                produced = store.setdefault("files", {})
                produced[command] = sorted(os.path.relpath(f, self.run_dir) for f in files)

    def record_ledger(self, name: str, report: CostReport, role: Optional[str] = None) -> None:
        """
        Store a phase's cost report.

        Args:
            name (str): Ledger name such as "htwin" or "centralized-maintenance"
            report (CostReport): Totals to store; wall time is left out
            role (str, optional): "candidate" or "baseline" for cost_reduction
        """
        if role is not None and role not in ROLES:
            raise ConfigurationError(f"role must be one of {ROLES}, got {role}", key="role")
        with self.lock:
            with self.store_scope() as store:
                store.setdefault("ledgers", {})[name] = {**report.to_dict(), "role": role}
                logging.info(f"Recorded cost ledger {name} ({role or 'unflagged'})")

    def ledgers(self) -> Dict[str, Dict[str, Any]]:
        return self.get("ledgers") or {}

    def export_store(self) -> Dict[str, Any]:
        if not os.path.exists(self.store_file):
            return {}
        with self.lock:
            return self._read_store()
