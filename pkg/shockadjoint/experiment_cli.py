"""
Command-line front end.

    python -m shockadjoint solve --config configs/scalar.toml --out runs/scalar
    python -m shockadjoint all --config configs/euler.toml

Exit codes: 0 success, 1 unexpected failure, 2 config error, 3 solver
divergence or singular system, 4 acceptance threshold not met.
"""
from pathlib import Path
from typing import List, Optional
import argparse
import asyncio
import json
import logging
import sys

from shockadjoint import __version__
from shockadjoint.core.config import load_config, resolve_database_url
from shockadjoint.core.errors import ShockAdjointError
from shockadjoint.data import database_config
from shockadjoint.data.database_service import RunLedger
from shockadjoint.stages.orchestrator import PIPELINES, ExperimentOrchestrator

logger = logging.getLogger(__name__)


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )
    # Disable noisy logging
    logging.getLogger('sqlalchemy.engine').setLevel(logging.WARNING)
    logging.getLogger('asyncio').setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="TOML experiment file (defaults if omitted)")
    common.add_argument("--out", type=str, default=None, help="output directory (overrides experiment.output_dir)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="shockadjoint",
        description="Adjoint error representation experiments for balance laws with shocks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="viscous primal and adjoint sweep")
    sub.add_parser("check-ibc", parents=[common], help="viscous interior boundary condition residuals")
    sub.add_parser("error-representation", parents=[common], help="error budget over the perturbation sweep")
    sub.add_parser("all", parents=[common], help="solve, check-ibc and error-representation in turn")
    runs = sub.add_parser("runs", parents=[common], help="list runs recorded in the ledger of an output directory")
    runs.add_argument("--run-id", type=int, default=None, help="show one run with its stages and files")
    runs.add_argument("--limit", type=int, default=20, help="number of recent runs to list")
    return parser


def show_runs(output_dir: Path, run_id: Optional[int], limit: int) -> int:
    """Print the ledger of output_dir: recent runs, or one run in full as JSON."""
    if not output_dir.is_dir():
        logger.error(f"output directory {output_dir} does not exist")
        return 1
    database_config.configure_database(resolve_database_url(output_dir))
    if not database_config.test_connection():
        logger.error(f"no ledger reachable for {output_dir}")
        return 1
    if run_id is not None:
        run = RunLedger.get_run(run_id)
        if run is None:
            logger.error(f"run {run_id} not found in the ledger")
            return 1
        print(json.dumps(run, indent=2, sort_keys=True, default=str))
        return 0
    for run in RunLedger.recent_runs(limit):
        print(
            f"{run['id']:>5}  {run['subcommand']:<20} {run['model']:<12} {run['status']:<10} "
            f"exit {run['exit_code']}  {run['created_at']}"
        )
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    if args.command == "runs":
        try:
            out = Path(args.out) if args.out else Path(load_config(args.config).experiment.output_dir)
        except ShockAdjointError as e:
            logger.error(e.detail)
            return e.exit_code
        return show_runs(out, args.run_id, args.limit)
    if args.command not in PIPELINES:
        logger.error(f"unknown command {args.command}")
        return 2
    try:
        config = load_config(args.config)
        for warning in config.policy_warnings():
            logger.warning(warning)
        out = Path(args.out) if args.out else None
        orchestrator = ExperimentOrchestrator(config, args.command, out)
        result = asyncio.run(orchestrator.process())
    except ShockAdjointError as e:
        logger.error(e.detail)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {str(e)}")
        return 1
    if result["status"] != "success":
        failed = [r for r in result["completed_stages_results"].values() if r["status"] == "error"]
        for r in failed:
            logger.error(f"{r['stage']}: {r['error']}")
    return result["exit_code"]
