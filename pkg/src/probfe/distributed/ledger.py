"""Job ledger: the coordinator's single source of truth for a batch of simulation jobs.

Every transition happens under one lock. Dispatch is at-least-once (a job
whose worker goes silent is re-queued after its deadline); completion is
exactly-once because only the first Ok result for a job is kept.
"""

from __future__ import annotations

import enum
import heapq
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from ..core import SampleMatrix, StudyError, ValidationError
from ..simulator import SimulationJob, SimulationResult


class UnknownWorker(StudyError, KeyError):
    pass


class UnknownJob(StudyError, KeyError):
    pass


class BatchFailed(StudyError):
    def __init__(self, failed: list[int], reasons: dict[int, str]):
        super().__init__(f"{len(failed)} job(s) failed permanently, samples {failed[:10]}")
        self.failed = failed
        self.reasons = reasons


class JobState(str, enum.Enum):
    PENDING = "pending"
    DISPATCHED = "dispatched"
    DONE = "done"
    FAILED = "failed"


@dataclass
class JobRecord:
    job: SimulationJob
    state: JobState = JobState.PENDING
    worker: str | None = None
    deadline: float | None = None
    attempts: int = 0
    result: SimulationResult | None = None
    reason: str = ""


@dataclass
class WorkerInfo:
    worker_id: str
    speed: float = 1.0
    inflight: set[str] = field(default_factory=set)
    last_heartbeat: float = 0.0


def job_id_for(seed: int, sample_id: int, tag: str = "") -> str:
    base = f"s{seed}-{sample_id:06d}"
    return f"{tag}-{base}" if tag else base


def make_jobs(samples: SampleMatrix, seed: int = 0, tag: str = "") -> list[SimulationJob]:
    if samples.n < 1:
        raise ValidationError("cannot submit an empty batch")
    return [
        SimulationJob(job_id_for(seed, i, tag), i, tuple(float(v) for v in row))
        for i, row in enumerate(samples.values)
    ]


class JobLedger:
    def __init__(
        self,
        jobs: list[SimulationJob],
        max_attempts: int = 3,
        initial_timeout: float = 30.0,
        timeout_factor: float = 10.0,
        timeout_floor: float = 1.0,
        workers: dict[str, WorkerInfo] | None = None,
        clock: Callable[[], float] = time.monotonic,
        lock: threading.RLock | None = None,
    ):
        if max_attempts < 1:
            raise ValidationError("max_attempts must be >= 1")
        self.max_attempts = max_attempts
        self.initial_timeout = initial_timeout
        self.timeout_factor = timeout_factor
        self.timeout_floor = timeout_floor
        self.clock = clock
        self.workers = {} if workers is None else workers
        self.records: dict[str, JobRecord] = {}
        self._by_sample: dict[int, str] = {}
        for job in jobs:
            if job.job_id in self.records:
                raise ValidationError(f"duplicate job id {job.job_id}")
            self.records[job.job_id] = JobRecord(job)
            self._by_sample[job.sample_id] = job.job_id
        self._pending = [(job.sample_id, job.job_id) for job in jobs]
        heapq.heapify(self._pending)
        self._durations: list[float] = []
        self._counts = {s: 0 for s in JobState}
        self._counts[JobState.PENDING] = len(jobs)
        self.changed = threading.Condition(lock or threading.RLock())

    # all public methods take the condition's lock

    @property
    def n(self) -> int:
        return len(self.records)

    def counters(self) -> dict[str, int]:
        with self.changed:
            return {s.value: c for s, c in self._counts.items()}

    def is_complete(self) -> bool:
        with self.changed:
            return self._counts[JobState.DONE] + self._counts[JobState.FAILED] == self.n

    @property
    def timeout(self) -> float:
        with self.changed:
            if not self._durations:
                return self.initial_timeout
            return max(self.timeout_floor, self.timeout_factor * statistics.median(self._durations))

    def _move(self, rec: JobRecord, state: JobState) -> None:
        self._counts[rec.state] -= 1
        self._counts[state] += 1
        rec.state = state

    def _release(self, rec: JobRecord) -> None:
        info = self.workers.get(rec.worker) if rec.worker else None
        if info is not None:
            info.inflight.discard(rec.job.job_id)
        rec.worker = None
        rec.deadline = None

    def register_worker(self, worker_id: str, speed: float = 1.0) -> WorkerInfo:
        with self.changed:
            info = self.workers.get(worker_id)
            if info is None:
                info = self.workers[worker_id] = WorkerInfo(worker_id, speed)
            info.speed = speed
            info.last_heartbeat = self.clock()
            return info

    def heartbeat(self, worker_id: str) -> None:
        with self.changed:
            if worker_id not in self.workers:
                raise UnknownWorker(worker_id)
            self.workers[worker_id].last_heartbeat = self.clock()

    def dispatch_next(self, worker_id: str, now: float | None = None) -> SimulationJob | None:
        """Hand the lowest pending sample_id to ``worker_id``, or None if nothing is pending."""
        with self.changed:
            info = self.workers.get(worker_id)
            if info is None:
                raise UnknownWorker(worker_id)
            now = self.clock() if now is None else now
            while self._pending:
                _, job_id = heapq.heappop(self._pending)
                rec = self.records[job_id]
                if rec.state is not JobState.PENDING:
                    continue  # stale heap entry (completed by a late report)
                self._move(rec, JobState.DISPATCHED)
                rec.worker = worker_id
                rec.deadline = now + self.timeout
                info.inflight.add(job_id)
                info.last_heartbeat = now
                self.changed.notify_all()
                return rec.job
            return None

    def report_result(self, worker_id: str, result: SimulationResult) -> str:
        """Apply a worker's report. Returns what happened: done, duplicate,
        requeued, failed or stale (a failure from a worker no longer assigned)."""
        with self.changed:
            rec = self.records.get(result.job_id)
            if rec is None:
                raise UnknownJob(result.job_id)
            if rec.state is JobState.DONE:
                return "duplicate"
            if result.ok:
                self._release(rec)
                rec.result = result
                self._move(rec, JobState.DONE)
                self._durations.append(result.duration)
                self.changed.notify_all()
                return "done"
            if rec.state is not JobState.DISPATCHED or rec.worker != worker_id:
                return "stale"
            rec.reason = result.reason
            outcome = self._fail_attempt(rec)
            self.changed.notify_all()
            return outcome

    def _fail_attempt(self, rec: JobRecord) -> str:
        self._release(rec)
        rec.attempts += 1
        if rec.attempts >= self.max_attempts:
            self._move(rec, JobState.FAILED)
            return "failed"
        self._move(rec, JobState.PENDING)
        heapq.heappush(self._pending, (rec.job.sample_id, rec.job.job_id))
        return "requeued"

    def reap_timeouts(self, now: float | None = None) -> int:
        """Return overdue dispatched jobs to the queue; the count re-queued is returned."""
        with self.changed:
            now = self.clock() if now is None else now
            requeued = 0
            for rec in self.records.values():
                if rec.state is JobState.DISPATCHED and rec.deadline is not None and rec.deadline < now:
                    rec.reason = f"timed out on {rec.worker}"
                    if self._fail_attempt(rec) == "requeued":
                        requeued += 1
            if requeued:
                self.changed.notify_all()
            return requeued

    def wait(self, timeout: float | None = None) -> bool:
        with self.changed:
            return self.changed.wait_for(self.is_complete, timeout)

    def results(self) -> list[SimulationResult]:
        """Done results ordered by sample_id; raises BatchFailed if any job failed."""
        with self.changed:
            failed = sorted(
                r.job.sample_id for r in self.records.values() if r.state is JobState.FAILED
            )
            if failed:
                reasons = {
                    r.job.sample_id: r.reason
                    for r in self.records.values()
                    if r.state is JobState.FAILED
                }
                raise BatchFailed(failed, reasons)
            return [
                self.records[self._by_sample[i]].result for i in sorted(self._by_sample)
            ]


def submit_batch(samples: SampleMatrix, seed: int = 0, tag: str = "", **kwargs) -> JobLedger:
    return JobLedger(make_jobs(samples, seed, tag), **kwargs)
