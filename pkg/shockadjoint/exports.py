"""
Output files: CSV tables, SAJ1 checkpoints and the hashed run manifest.

Every file goes through OutputWriter, which writes atomically and records the
sha256 of what it wrote. CSV floats use 17 significant digits and Unix
newlines so reruns are byte-identical.
"""
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence
import csv
import hashlib
import io
import json
import logging
import os
import struct

import numpy as np
from pydantic import BaseModel, Field

from shockadjoint import __version__
from shockadjoint.core.errors import ShockAdjointError
from shockadjoint.models.reference_solutions import PiecewiseSolution
from shockadjoint.solvers.viscous_solver import FieldSolution, Grid

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SAJ1"
_HEADER = struct.Struct("<4sIId")


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "n/a"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ShockAdjointError(f"row has {len(row)} fields, header has {len(header)}")
        writer.writerow([format_value(v) for v in row])
    return buffer.getvalue()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(str(tmp), str(path))


# ---------------------------------------------------------------------------
# Payload builders
# ---------------------------------------------------------------------------

def field_table(sol, component_names: Sequence[str]) -> str:
    """x, components..., eps for a primal or adjoint nodal solution."""
    header = ["x", *component_names, "epsilon"]
    rows = (
        [x, *values, sol.epsilon]
        for x, values in zip(sol.grid.nodes, sol.values)
    )
    return render_csv(header, rows)


def piecewise_table(solution: PiecewiseSolution, points: int = 1001) -> str:
    """Sampled exact or perturbed solution with its branch id (0 left, 1 right)."""
    x = np.linspace(0.0, 1.0, points)
    values = solution.evaluate(x)
    branch = (x >= solution.shock_location).astype(int)
    header = ["x", *solution.model.component_names, "branch"]
    return render_csv(header, ([xi, *vi, int(bi)] for xi, vi, bi in zip(x, values, branch)))


def checkpoint_bytes(sol: FieldSolution) -> bytes:
    """SAJ1 layout: magic, u32 cells, u32 d, f64 eps, f64 nodes, f64 values row-major."""
    values = np.ascontiguousarray(sol.values, dtype="<f8")
    head = _HEADER.pack(CHECKPOINT_MAGIC, sol.grid.cells, values.shape[1], float(sol.epsilon))
    return head + np.ascontiguousarray(sol.grid.nodes, dtype="<f8").tobytes() + values.tobytes()


def read_checkpoint(path: Path) -> FieldSolution:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ShockAdjointError(f"{path}: truncated checkpoint")
    magic, cells, dimension, epsilon = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ShockAdjointError(f"{path}: not a SAJ1 checkpoint")
    n_nodes = cells + 1
    expected = _HEADER.size + 8 * n_nodes * (1 + dimension)
    if len(data) != expected:
        raise ShockAdjointError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    nodes = body[:n_nodes].astype(float)
    values = body[n_nodes:].reshape(n_nodes, dimension).astype(float)
    # Checkpoints are only written for converged solves.
    return FieldSolution(Grid(nodes), values, float(epsilon), True, 0, 0.0)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

class StageRecord(BaseModel):
    name: str
    status: str
    converged: bool = True
    wall_clock: float = 0.0
    error: Optional[str] = None
    summary: Dict[str, Any] = Field(default_factory=dict)


class RunManifest(BaseModel):
    tool_version: str = __version__
    subcommand: str
    config: Dict[str, Any]
    workers: int
    worker_source: str
    warnings: List[str] = Field(default_factory=list)
    stages: List[StageRecord] = Field(default_factory=list)
    files: Dict[str, str] = Field(default_factory=dict, description="relative path -> sha256")
    failed_stage: Optional[str] = None


class OutputWriter:
    """Single writer for one output directory."""

    MANIFEST_NAME = "manifest.json"

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: Dict[str, str] = {}

    def _record(self, name: str, data: bytes) -> Path:
        path = self.root / name
        _atomic_write_bytes(path, data)
        self.files[name] = hashlib.sha256(data).hexdigest()
        logger.debug(f"wrote {path} ({len(data)} bytes)")
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self._record(name, text.encode("utf-8"))

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return self.write_text(name, render_csv(header, rows))

    def write_checkpoint(self, name: str, sol: FieldSolution) -> Path:
        return self._record(name, checkpoint_bytes(sol))

    def verify(self) -> List[str]:
        """Names whose on-disk hash no longer matches what was written."""
        return [
            name for name, digest in sorted(self.files.items())
            if not (self.root / name).exists() or sha256_file(self.root / name) != digest
        ]

    def carried_files(self) -> Dict[str, str]:
        """Entries of an earlier manifest in this directory whose files are still intact.

        Files rewritten by this run take precedence; entries whose file is gone
        or whose hash no longer matches are dropped with a warning.
        """
        path = self.root / self.MANIFEST_NAME
        if not path.exists():
            return {}
        try:
            earlier = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            logger.warning(f"ignoring unreadable earlier manifest {path}: {exc}")
            return {}
        carried = {}
        for name, digest in earlier.files.items():
            if name in self.files:
                continue
            on_disk = self.root / name
            if on_disk.exists() and sha256_file(on_disk) == digest:
                carried[name] = digest
            else:
                logger.warning(f"dropping stale manifest entry {name}")
        return carried

    def write_manifest(self, manifest: RunManifest) -> Path:
        mismatched = self.verify()
        if mismatched:
            raise ShockAdjointError(f"output files changed on disk: {', '.join(mismatched)}")
        files = {**self.carried_files(), **self.files}
        manifest = manifest.model_copy(update={"files": dict(sorted(files.items()))})
        text = json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
        path = self.root / self.MANIFEST_NAME
        _atomic_write_bytes(path, text.encode("utf-8"))
        return path
