"""Concurrent processing of independent registration cases."""

import asyncio
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

from .errors import SdmregError
from .optimizer import RegistrationResult
from .storage.manifest import CaseManifest

logger = logging.getLogger(__name__)


@dataclass
class CaseJob:
    """One case registered in one mode, writing into ``out_dir``."""

    case: CaseManifest
    mode: str
    out_dir: Path

    @property
    def case_id(self) -> str:
        return self.case.case_id


@dataclass
class CaseOutcome:
    job: CaseJob
    result: Optional[RegistrationResult] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class BatchConfig:
    """Configuration for case batching."""

    max_workers: int = 2
    fail_fast: bool = False

    def __post_init__(self):
        """Validate configuration."""
        if self.max_workers < 1:
            raise ValueError("max_workers must be >= 1")


class BatchProcessor:
    """Runs case jobs on a bounded thread pool and keeps run statistics."""

    def __init__(self, run_case: Callable[[CaseJob], RegistrationResult], config: Optional[BatchConfig] = None):
        self.run_case = run_case
        self.config = config or BatchConfig()
        self._stats = {
            'cases_completed': 0,
            'cases_failed': 0,
            'total_wall_time': 0.0,
            'average_wall_time': 0.0,
        }

    async def process(self, jobs: Sequence[CaseJob]) -> List[CaseOutcome]:
        """Run all jobs concurrently; outcomes keep the input order."""
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self.config.max_workers) as pool:
            tasks = [self._run_one(loop, pool, job) for job in jobs]
            return list(await asyncio.gather(*tasks))

    async def _run_one(self, loop, pool: ThreadPoolExecutor, job: CaseJob) -> CaseOutcome:
        started = time.perf_counter()
        try:
            result = await loop.run_in_executor(pool, self.run_case, job)
        except (SdmregError, ValueError, OSError) as e:
            self._stats['cases_failed'] += 1
            logger.error("Case %s (%s) failed: %s: %s", job.case_id, job.mode, type(e).__name__, e)
            if self.config.fail_fast:
                raise
            return CaseOutcome(job=job, error=f"{type(e).__name__}: {e}")
        self._update_stats(time.perf_counter() - started)
        logger.info("Case %s (%s) done", job.case_id, job.mode)
        return CaseOutcome(job=job, result=result)

    def run(self, jobs: Sequence[CaseJob]) -> List[CaseOutcome]:
        """Synchronous entry point for the CLI."""
        return asyncio.run(self.process(jobs))

    def _update_stats(self, wall_time: float) -> None:
        """Update processing statistics."""
        self._stats['cases_completed'] += 1
        self._stats['total_wall_time'] += wall_time
        self._stats['average_wall_time'] = (
            self._stats['total_wall_time'] / self._stats['cases_completed']
        )

    def get_statistics(self) -> dict:
        """Get processing statistics."""
        return self._stats.copy()
