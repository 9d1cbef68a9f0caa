from datetime import datetime, timezone
from typing import Any, Dict, List, Optional
import logging

from shockadjoint.data.database_config import close_db_session, get_db_session
from shockadjoint.data.models import ExperimentRun, OutputFile, StageResult

logger = logging.getLogger(__name__)


class RunLedger:
    """
    Service layer for the run ledger.
    Every method commits its own session and returns None/False on failure.
    """

    @staticmethod
    def create_run(subcommand: str, model: str, config_hash: str, output_dir: str) -> Optional[int]:
        session = get_db_session()
        try:
            run = ExperimentRun(
                subcommand=subcommand,
                model=model,
                config_hash=config_hash,
                output_dir=output_dir,
                status='running',
            )
            session.add(run)
            session.commit()
            session.refresh(run)
            logger.debug(f"Created ledger run {run.id}")
            return run.id
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to create ledger run: {str(e)}")
            return None
        finally:
            close_db_session(session)

    @staticmethod
    def save_stage_result(
        run_id: int,
        stage_name: str,
        status: str,
        wall_clock: float,
        payload: Optional[Dict[str, Any]] = None,
        error_message: Optional[str] = None,
    ) -> Optional[int]:
        session = get_db_session()
        try:
            result = StageResult(
                run_id=run_id,
                stage_name=stage_name,
                status=status,
                wall_clock=wall_clock,
                payload=payload,
                error_message=error_message,
            )
            session.add(result)
            session.commit()
            session.refresh(result)
            return result.id
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to save stage result for {stage_name}: {str(e)}")
            return None
        finally:
            close_db_session(session)

    @staticmethod
    def complete_run(
        run_id: int,
        status: str,
        exit_code: int,
        total_wall_clock: float,
        files: Dict[str, str],
    ) -> bool:
        session = get_db_session()
        try:
            run = session.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
            if not run:
                logger.warning(f"Ledger run {run_id} not found")
                return False
            run.status = status
            run.exit_code = exit_code
            run.total_wall_clock = total_wall_clock
            run.completed_at = datetime.now(timezone.utc)
            for path, digest in sorted(files.items()):
                session.add(OutputFile(run_id=run_id, path=path, sha256=digest))
            session.commit()
            return True
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to complete ledger run {run_id}: {str(e)}")
            return False
        finally:
            close_db_session(session)

    @staticmethod
    def get_run(run_id: int) -> Optional[Dict[str, Any]]:
        session = get_db_session()
        try:
            run = session.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
            if not run:
                return None
            data = run.to_dict()
            data['stages'] = [stage.to_dict() for stage in run.stages]
            data['files'] = [f.to_dict() for f in run.files]
            return data
        except Exception as e:
            logger.error(f"Failed to load ledger run {run_id}: {str(e)}")
            return None
        finally:
            close_db_session(session)

    @staticmethod
    def recent_runs(limit: int = 20) -> List[Dict[str, Any]]:
        session = get_db_session()
        try:
            runs = session.query(ExperimentRun).order_by(ExperimentRun.id.desc()).limit(limit).all()
            return [run.to_dict() for run in runs]
        except Exception as e:
            logger.error(f"Failed to list ledger runs: {str(e)}")
            return []
        finally:
            close_db_session(session)
