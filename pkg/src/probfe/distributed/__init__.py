"""Coordinator/worker execution of simulation batches."""

from .coordinator import Coordinator, parse_address
from .ledger import (
    BatchFailed,
    JobLedger,
    JobState,
    UnknownJob,
    UnknownWorker,
    WorkerInfo,
    job_id_for,
    make_jobs,
    submit_batch,
)
from .local import LocalExecutor
from .worker import ConnectionLost, run_worker_loop, run_workers

__all__ = [
    "BatchFailed",
    "ConnectionLost",
    "Coordinator",
    "JobLedger",
    "JobState",
    "LocalExecutor",
    "UnknownJob",
    "UnknownWorker",
    "WorkerInfo",
    "job_id_for",
    "make_jobs",
    "parse_address",
    "run_worker_loop",
    "run_workers",
    "submit_batch",
]
