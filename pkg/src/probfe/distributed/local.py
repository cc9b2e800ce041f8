"""In-process executor with the same batch interface as the coordinator."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

from ..core import SampleMatrix
from ..simulator import SimulationJob, SimulationResult, Simulator, simulate
from .ledger import BatchFailed, make_jobs


class LocalExecutor:
    """Runs jobs on a thread pool (or inline with one worker).

    Failed jobs are retried up to ``max_attempts`` times in total, matching
    the coordinator's retry policy.
    """

    def __init__(self, simulator: Simulator, workers: int = 1, max_attempts: int = 3):
        self.simulator = simulator
        self.workers = max(1, workers)
        self.max_attempts = max_attempts

    @property
    def worker_count(self) -> int:
        return self.workers

    def _run(self, job: SimulationJob) -> SimulationResult:
        for _ in range(self.max_attempts):
            result = simulate(self.simulator, job)
            if result.ok:
                break
        return result

    def run_batch(self, samples: SampleMatrix, seed: int = 0, tag: str = "") -> list[SimulationResult]:
        jobs = make_jobs(samples, seed, tag)
        if self.workers == 1:
            results = [self._run(job) for job in jobs]
        else:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(self._run, jobs))
        failed = [r.sample_id for r in results if not r.ok]
        if failed:
            raise BatchFailed(failed, {r.sample_id: r.reason for r in results if not r.ok})
        return results
