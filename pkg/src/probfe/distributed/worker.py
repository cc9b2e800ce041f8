"""Worker process: register, then pull / simulate / report until told to stop."""

from __future__ import annotations

import logging
import os
import socket
import threading
import time
from typing import Any

from ..core import StudyError, load_study_spec
from ..simulator import SimulationResult, Simulator, build_simulator, simulate
from . import protocol as proto

log = logging.getLogger(__name__)


class ConnectionLost(StudyError, ConnectionError):
    pass


class _Channel:
    def __init__(self, address: tuple[str, int], timeout: float | None):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.settimeout(None)
        self.rfile = self.sock.makefile("rb")
        self._send_lock = threading.Lock()

    def send(self, msg: dict[str, Any]) -> None:
        data = proto.encode(msg)
        with self._send_lock:
            self.sock.sendall(data)

    def request(self, msg: dict[str, Any]) -> dict[str, Any]:
        self.send(msg)
        reply = proto.read_message(self.rfile)
        if reply is None:
            raise ConnectionError("coordinator closed the connection")
        return reply

    def close(self) -> None:
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


def default_worker_id() -> str:
    return f"{socket.gethostname()}-{os.getpid()}"


def _simulator_from_handshake(ack: dict[str, Any]) -> Simulator:
    config = ack.get("config")
    if config is None:
        raise StudyError("coordinator sent no study config and the worker has none")
    return build_simulator(load_study_spec(config))


def _run_job(simulator: Simulator, msg: dict[str, Any]) -> SimulationResult:
    job = proto.job_from_message(msg)
    start = time.perf_counter()
    try:
        return simulate(simulator, job)
    except Exception as exc:  # report, never crash the worker on a bad job
        log.exception("job %s raised", job.job_id)
        return SimulationResult.failed(
            job.job_id, f"{type(exc).__name__}: {exc}", time.perf_counter() - start, job.sample_id
        )


def run_worker_loop(
    address: tuple[str, int],
    simulator: Simulator | None = None,
    *,
    worker_id: str | None = None,
    speed: float = 1.0,
    heartbeat_interval: float = 1.0,
    idle_timeout: float | None = None,
    poll_interval: float = 0.05,
    connect_attempts: int = 5,
    backoff: float = 0.2,
) -> int:
    """Serve jobs from the coordinator at ``address``; returns the number of jobs run.

    Stops on a ``shutdown`` message, or after ``idle_timeout`` seconds of
    ``no_work`` replies. A dropped connection is retried ``connect_attempts``
    times with exponential backoff before ConnectionLost is raised.
    """
    worker_id = worker_id or default_worker_id()
    done = 0
    failures = 0
    while True:
        try:
            chan = _Channel(address, timeout=5.0)
        except OSError as exc:
            failures += 1
            if failures > connect_attempts:
                raise ConnectionLost(f"cannot reach coordinator at {address}: {exc}") from exc
            time.sleep(backoff * 2 ** (failures - 1))
            continue
        stop = threading.Event()
        try:
            ack = chan.request({"type": proto.REGISTER, "worker_id": worker_id, "speed": speed})
            if simulator is None:
                simulator = _simulator_from_handshake(ack)
            failures = 0
            beat = threading.Thread(
                target=_heartbeat, args=(chan, worker_id, heartbeat_interval, stop), daemon=True
            )
            beat.start()
            idle_since = None
            while True:
                reply = chan.request({"type": proto.JOB_REQUEST, "worker_id": worker_id})
                kind = reply["type"]
                if kind == proto.SHUTDOWN:
                    log.info("worker %s: shutdown after %d jobs", worker_id, done)
                    return done
                if kind == proto.JOB:
                    idle_since = None
                    result = _run_job(simulator, reply)
                    chan.request(proto.result_message(worker_id, result))
                    done += 1
                    continue
                now = time.monotonic()
                idle_since = idle_since or now
                if idle_timeout is not None and now - idle_since >= idle_timeout:
                    log.info("worker %s: idle for %.1fs, exiting", worker_id, now - idle_since)
                    return done
                time.sleep(poll_interval)
        except (ConnectionError, OSError) as exc:
            failures += 1
            log.warning("worker %s: connection problem (%s), attempt %d", worker_id, exc, failures)
            if failures > connect_attempts:
                raise ConnectionLost(str(exc)) from exc
            time.sleep(backoff * 2 ** (failures - 1))
        finally:
            stop.set()
            chan.close()


def _heartbeat(chan: _Channel, worker_id: str, interval: float, stop: threading.Event) -> None:
    while not stop.wait(interval):
        try:
            chan.send({"type": proto.HEARTBEAT, "worker_id": worker_id})
        except OSError:
            return


def run_workers(address: tuple[str, int], slots: int = 1, simulator: Simulator | None = None, **kwargs) -> int:
    """Run ``slots`` independent worker loops in threads; returns total jobs run."""
    if slots <= 1:
        return run_worker_loop(address, simulator, **kwargs)
    base = kwargs.pop("worker_id", None) or default_worker_id()
    counts = [0] * slots
    errors: list[BaseException] = []

    def target(k: int) -> None:
        try:
            counts[k] = run_worker_loop(address, simulator, worker_id=f"{base}-{k}", **kwargs)
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=target, args=(k,)) for k in range(slots)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return sum(counts)
