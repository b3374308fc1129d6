"""
Run ledger and reproducibility manifest.

Every task run is logged with its pulse parameters, truncation dims,
integrator step, convergence flag and wall time. Output files are
registered against exactly one manifest entry. The manifest is written
last so an interrupted run leaves no manifest behind.
"""

import hashlib
import logging
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from qbus.records import to_jsonable, write_json

logger = logging.getLogger(__name__)


@dataclass
class RunRecord:
    """One task run as it appears in the manifest."""
    run_id: str
    kind: str
    params: Dict
    pulse: Optional[Dict]
    dims: Optional[List[int]]
    dt: Optional[float]
    converged: bool
    wall_time: float
    status: str = "ok"
    timestamp: float = field(default_factory=time.time)


@dataclass
class Manifest:
    tool_version: str
    config_hash: str
    command: str
    runs: List[Dict]
    outputs: Dict[str, Dict]
    summary: Dict

    def to_dict(self) -> Dict:
        return {
            "tool_version": self.tool_version, "config_hash": self.config_hash,
            "command": self.command, "runs": self.runs, "outputs": self.outputs,
            "summary": self.summary,
        }


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunLedger:
    """
    Collects run records and output files for one CLI invocation.

    Args:
        max_history: Maximum number of run records kept in memory
    """

    def __init__(self, max_history: int = 10000):
        self.max_history = max_history
        self.runs: deque = deque(maxlen=max_history)
        self.failures: deque = deque(maxlen=max_history)
        self.outputs: Dict[str, str] = {}

        self.total_runs = 0
        self.failed_runs = 0
        self.non_converged = 0
        self.total_wall_time = 0.0
        self.kind_counts: Dict[str, int] = defaultdict(int)

    def record_run(self, kind: str, params: Dict, pulse: Optional[Dict] = None,
                   dims=None, dt: Optional[float] = None, converged: bool = True,
                   wall_time: float = 0.0, status: str = "ok") -> RunRecord:
        """Register one task run; failures and non-converged runs are counted separately."""
        record = RunRecord(
            run_id=f"{kind}-{self.total_runs:04d}", kind=kind, params=to_jsonable(params),
            pulse=to_jsonable(pulse), dims=None if dims is None else list(dims),
            dt=dt, converged=converged, wall_time=wall_time, status=status,
        )
        self.runs.append(record)
        self.total_runs += 1
        self.kind_counts[kind] += 1
        self.total_wall_time += wall_time
        if status != "ok":
            self.failed_runs += 1
            self.failures.append(record)
            logger.warning(f"run {record.run_id} {status}")
        elif not converged:
            self.non_converged += 1
            logger.warning(f"run {record.run_id} did not converge in truncation")
        logger.debug(f"recorded {record.run_id} ({wall_time:.2f}s)")
        return record

    def record_row_runs(self, kind: str, rows: List[Dict]) -> None:
        """Register the runs behind a sweep table, one per row."""
        for row in rows:
            dims = row.get("dims")
            self.record_run(
                kind, {k: v for k, v in row.items()
                       if k not in ("dims", "dt", "wall_time", "converged", "status")},
                dims=None if dims is None else [int(x) for x in str(dims).split("x")],
                dt=row.get("dt"), converged=bool(row.get("converged", True)),
                wall_time=row.get("wall_time") or 0.0, status=row.get("status", "ok"),
            )

    def record_output(self, path: str, run_id: Optional[str] = None) -> None:
        """Bind an output file to one run entry (the latest run by default)."""
        if path in self.outputs:
            raise ValueError(f"output {path} already registered")
        if run_id is None:
            run_id = self.runs[-1].run_id if self.runs else "command"
        self.outputs[path] = run_id

    @property
    def has_failures(self) -> bool:
        return self.failed_runs > 0 or self.non_converged > 0

    def get_metrics_summary(self) -> Dict:
        """
        Aggregate counters for the invocation.

        Returns:
            Dictionary with run, failure and convergence counts and mean wall time
        """
        avg_wall = self.total_wall_time / self.total_runs if self.total_runs else 0.0
        return {
            "total_runs": self.total_runs,
            "failed_runs": self.failed_runs,
            "non_converged_runs": self.non_converged,
            "total_wall_time": round(self.total_wall_time, 3),
            "average_wall_time": round(avg_wall, 3),
            "runs_per_kind": dict(self.kind_counts),
            "outputs": len(self.outputs),
        }

    def build_manifest(self, tool_version: str, config_hash: str, command: str) -> Manifest:
        outputs = {}
        for path, run_id in sorted(self.outputs.items()):
            outputs[path] = {"run": run_id, "sha256": file_digest(path)}
        runs = [to_jsonable(r.__dict__) for r in self.runs]
        return Manifest(tool_version, config_hash, command, runs, outputs,
                        self.get_metrics_summary())

    def write_manifest(self, path: str, tool_version: str, config_hash: str,
                       command: str) -> Manifest:
        """Write the manifest atomically; call after every output is on disk."""
        manifest = self.build_manifest(tool_version, config_hash, command)
        write_json(path, manifest.to_dict())
        logger.info(f"manifest {path}: {self.total_runs} runs, {len(self.outputs)} outputs")
        return manifest

    def reset(self):
        self.runs.clear()
        self.failures.clear()
        self.outputs.clear()
        self.total_runs = 0
        self.failed_runs = 0
        self.non_converged = 0
        self.total_wall_time = 0.0
        self.kind_counts.clear()
