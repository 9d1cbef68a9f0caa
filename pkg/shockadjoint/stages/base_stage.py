from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional
import asyncio
import logging
import time

from shockadjoint.core.config import ExperimentConfig
from shockadjoint.core.errors import AcceptanceError, ShockAdjointError
from shockadjoint.exports import OutputWriter
from shockadjoint.models.balance_models import ModelSpec

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    """State shared by the stages of one run."""

    config: ExperimentConfig
    model: ModelSpec
    writer: OutputWriter
    executor: ThreadPoolExecutor
    warnings: List[str] = field(default_factory=list)
    primal_solutions: Optional[list] = None
    adjoint_solutions: Optional[list] = None

    @property
    def output_dir(self) -> Path:
        return self.writer.root

    async def run_in_pool(self, func: Callable, *args, **kwargs):
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.executor, partial(func, *args, **kwargs))

    async def gather_ordered(self, func: Callable, items: List[Any]) -> List[Any]:
        """func over items on the pool; results in item order, first failure re-raised."""
        results = await asyncio.gather(*(self.run_in_pool(func, item) for item in items), return_exceptions=True)
        for index, result in enumerate(results):
            if isinstance(result, BaseException):
                logger.error(f"sweep point {index} failed: {result}")
                raise result
        return list(results)


class BaseStage(ABC):
    name: str = "stage"

    def __init__(self, context: RunContext):
        self.context = context
        self.config = context.config
        self.model = context.model

    @abstractmethod
    async def run(self) -> Dict[str, Any]:
        """
        Do the stage's work and return a JSON-serializable summary.
        Each stage must implement this method.
        """
        raise NotImplementedError("Each stage must implement run")

    def check_acceptance(self, failures: List[str]) -> None:
        """Raise on failed acceptance properties, or downgrade them to warnings."""
        if not failures:
            return
        if self.config.acceptance.enforce:
            raise AcceptanceError("; ".join(failures))
        for failure in failures:
            logger.warning(f"{self.name}: acceptance not met: {failure}")
            self.context.warnings.append(f"{self.name}: {failure}")

    def format_output(self, data: Dict[str, Any], wall_clock: float) -> Dict[str, Any]:
        return {
            "status": "success",
            "data": data,
            "stage": self.name,
            "wall_clock": wall_clock,
        }

    async def process(self) -> Dict[str, Any]:
        """Run the stage; failures come back as an error dict, never as an exception."""
        start = time.time()
        logger.info(f"\n{'=' * 60}\n{self.name}\n{'=' * 60}")
        try:
            data = await self.run()
            return self.format_output(data, time.time() - start)
        except ShockAdjointError as e:
            logger.error(f"{self.name} failed: {e.detail}")
            return {
                "status": "error",
                "error": e.detail,
                "exit_code": e.exit_code,
                "stage": self.name,
                "wall_clock": time.time() - start,
            }
        except Exception as e:
            logger.exception(f"Unexpected error in {self.name}: {str(e)}")
            return {
                "status": "error",
                "error": str(e),
                "exit_code": 1,
                "stage": self.name,
                "wall_clock": time.time() - start,
            }
