"""Newline-delimited JSON messages exchanged between coordinator and workers.

One JSON object per line, discriminated by ``type``. Receivers ignore
fields they do not know.
"""

from __future__ import annotations

import json
import logging
from typing import Any, BinaryIO

import numpy as np

from ..simulator import SimulationJob, SimulationResult

log = logging.getLogger(__name__)

REGISTER = "register"
JOB_REQUEST = "job_request"
JOB = "job"
NO_WORK = "no_work"
RESULT = "result"
ACK = "ack"
HEARTBEAT = "heartbeat"
SHUTDOWN = "shutdown"


def encode(msg: dict[str, Any]) -> bytes:
    return (json.dumps(msg, separators=(",", ":"), allow_nan=False) + "\n").encode()


def read_message(stream: BinaryIO) -> dict[str, Any] | None:
    """Next well-formed message from ``stream``; None at end of stream."""
    while True:
        line = stream.readline()
        if not line:
            return None
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            log.warning("dropping malformed line %r", line[:80])
            continue
        if isinstance(msg, dict) and isinstance(msg.get("type"), str):
            return msg
        log.warning("dropping message without a type: %r", line[:80])


def job_message(job: SimulationJob) -> dict[str, Any]:
    return {"type": JOB, "job_id": job.job_id, "sample_id": job.sample_id, "inputs": list(job.inputs)}


def job_from_message(msg: dict[str, Any]) -> SimulationJob:
    return SimulationJob(
        str(msg["job_id"]), int(msg["sample_id"]), tuple(float(v) for v in msg["inputs"])
    )


def result_message(worker_id: str, result: SimulationResult) -> dict[str, Any]:
    msg = {
        "type": RESULT,
        "worker_id": worker_id,
        "job_id": result.job_id,
        "status": result.status,
        "series": [] if result.series is None else result.series.tolist(),
        "summaries": [] if result.summaries is None else result.summaries.tolist(),
        "duration_ms": result.duration * 1000.0,
    }
    if result.reason:
        msg["reason"] = result.reason
    return msg


def result_from_message(msg: dict[str, Any], sample_id: int = -1) -> SimulationResult:
    ok = msg.get("status") == "ok"
    duration = float(msg.get("duration_ms", 0.0)) / 1000.0
    if not ok:
        return SimulationResult.failed(
            str(msg["job_id"]), str(msg.get("reason", "worker reported failure")), duration, sample_id
        )
    series = np.array(msg["series"], dtype=float)
    summaries = np.array(msg["summaries"], dtype=float)
    return SimulationResult(str(msg["job_id"]), series, summaries, duration, "ok", "", sample_id)
