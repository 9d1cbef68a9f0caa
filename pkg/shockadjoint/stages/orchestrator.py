from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Type
import hashlib
import json
import logging
import time

from shockadjoint.core.config import ExperimentConfig, resolve_database_url, resolve_workers
from shockadjoint.data import database_config
from shockadjoint.data.database_service import RunLedger
from shockadjoint.exports import OutputWriter, RunManifest, StageRecord
from shockadjoint.models.balance_models import model_from_config
from shockadjoint.stages.base_stage import BaseStage, RunContext
from shockadjoint.stages.error_representation_stage import ErrorRepresentationStage
from shockadjoint.stages.ibc_stage import IbcStage
from shockadjoint.stages.solve_stage import SolveStage

logger = logging.getLogger(__name__)

PIPELINES: Dict[str, List[Type[BaseStage]]] = {
    "solve": [SolveStage],
    "check-ibc": [IbcStage],
    "error-representation": [ErrorRepresentationStage],
    "all": [SolveStage, IbcStage, ErrorRepresentationStage],
}


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ExperimentOrchestrator:
    """
    Runs the stages of one subcommand in order and records the outcome.

    Stages run sequentially; sweep points inside a stage fan out over a
    bounded thread pool. The run ledger is optional: without a reachable
    database the run continues and only the manifest is written.
    """

    def __init__(self, config: ExperimentConfig, subcommand: str, output_dir: Optional[Path] = None):
        if subcommand not in PIPELINES:
            raise ValueError(f"unknown subcommand {subcommand!r}")
        self.config = config
        self.subcommand = subcommand
        self.output_dir = Path(output_dir or config.experiment.output_dir)
        self.workers, self.worker_source = resolve_workers(config)
        self.current_run_id: Optional[int] = None
        self.db_enabled = False

    def _test_database_connection(self) -> bool:
        try:
            database_config.configure_database(resolve_database_url(self.output_dir))
            return database_config.test_connection()
        except Exception as e:
            logger.warning(f"Run ledger unavailable, continuing without it: {str(e)}")
            return False

    def _save_stage_result(self, result: Dict[str, Any]) -> None:
        if not self.db_enabled or not self.current_run_id:
            return
        RunLedger.save_stage_result(
            self.current_run_id,
            result["stage"],
            result["status"],
            result["wall_clock"],
            payload=result.get("data"),
            error_message=result.get("error"),
        )

    def _update_run_completion(self, status: str, exit_code: int, wall_clock: float, files: Dict[str, str]) -> None:
        if not self.db_enabled or not self.current_run_id:
            return
        RunLedger.complete_run(self.current_run_id, status, exit_code, wall_clock, files)

    async def process(self) -> Dict[str, Any]:
        start = time.time()
        writer = OutputWriter(self.output_dir)
        self.db_enabled = self._test_database_connection()
        if self.db_enabled:
            self.current_run_id = RunLedger.create_run(
                self.subcommand, self.config.selected_model, config_hash(self.config), str(self.output_dir)
            )

        manifest = RunManifest(
            subcommand=self.subcommand,
            config=self.config.model_dump(mode="json"),
            workers=self.workers,
            worker_source=self.worker_source,
        )
        results: Dict[str, Any] = {}
        exit_code = 0
        logger.info(f"{self.subcommand}: model={self.config.selected_model}, workers={self.workers} ({self.worker_source})")

        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            context = RunContext(
                config=self.config,
                model=model_from_config(self.config),
                writer=writer,
                executor=executor,
                warnings=list(self.config.policy_warnings()),
            )
            for stage_class in PIPELINES[self.subcommand]:
                stage = stage_class(context)
                result = await stage.process()
                results[stage.name] = result
                self._save_stage_result(result)
                converged = result["status"] == "success"
                manifest.stages.append(StageRecord(
                    name=stage.name,
                    status=result["status"],
                    converged=converged,
                    wall_clock=result["wall_clock"],
                    error=result.get("error"),
                    summary=result.get("data") or {},
                ))
                if not converged:
                    manifest.failed_stage = stage.name
                    exit_code = result["exit_code"]
                    break
            manifest.warnings = context.warnings

        manifest_path = writer.write_manifest(manifest)
        status = "completed" if exit_code == 0 else "failed"
        self._update_run_completion(status, exit_code, time.time() - start, writer.files)
        logger.info(f"{self.subcommand} {status} in {time.time() - start:.1f}s; manifest {manifest_path}")
        return {
            "status": "success" if exit_code == 0 else "error",
            "exit_code": exit_code,
            "manifest": str(manifest_path),
            "completed_stages_results": results,
            "run_id": self.current_run_id,
        }
