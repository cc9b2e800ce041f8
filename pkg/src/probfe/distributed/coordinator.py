"""TCP coordinator that farms simulation jobs out to pull-based workers."""

from __future__ import annotations

import logging
import socketserver
import threading
import time
from typing import Any

from ..core import SampleMatrix
from ..simulator import SimulationResult
from . import protocol as proto
from .ledger import JobLedger, UnknownJob, WorkerInfo, make_jobs

log = logging.getLogger(__name__)


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


class _Handler(socketserver.StreamRequestHandler):
    server: "_Server"

    def handle(self) -> None:
        coord = self.server.coordinator
        peer = None
        while True:
            try:
                msg = proto.read_message(self.rfile)
            except (ConnectionError, OSError):
                break
            if msg is None:
                break
            peer = msg.get("worker_id", peer)
            try:
                reply = coord.handle_message(msg)
            except UnknownJob as exc:
                log.warning("report for unknown job %s from %s", exc, peer)
                reply = {"type": proto.ACK}
            if reply is None:
                continue
            try:
                self.wfile.write(proto.encode(reply))
                self.wfile.flush()
            except (ConnectionError, OSError):
                break
        log.debug("connection from %s closed", peer)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, coordinator: "Coordinator"):
        self.coordinator = coordinator
        super().__init__(address, _Handler)


class Coordinator:
    """Owns one ledger per submitted batch and serves workers over TCP.

    ``handshake`` is sent to every worker in the ``ack`` to its
    ``register``; workers started without their own config use its
    ``config`` entry to build the simulator.
    """

    def __init__(
        self,
        bind: tuple[str, int] = ("127.0.0.1", 0),
        *,
        max_attempts: int = 3,
        initial_timeout: float = 30.0,
        timeout_factor: float = 10.0,
        timeout_floor: float = 1.0,
        reap_interval: float = 0.1,
        handshake: dict[str, Any] | None = None,
    ):
        self.bind = bind
        self.max_attempts = max_attempts
        self.initial_timeout = initial_timeout
        self.timeout_factor = timeout_factor
        self.timeout_floor = timeout_floor
        self.reap_interval = reap_interval
        self.handshake = handshake or {}
        self.workers: dict[str, WorkerInfo] = {}
        self.ledger: JobLedger | None = None
        self._lock = threading.RLock()
        self._closing = threading.Event()
        self._server: _Server | None = None
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        assert self._server is not None, "coordinator not started"
        host, port = self._server.server_address[:2]
        return host, port

    @property
    def address_text(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    @property
    def worker_count(self) -> int:
        with self._lock:
            return len(self.workers)

    def start(self) -> "Coordinator":
        self._server = _Server(self.bind, self)
        serve = threading.Thread(target=self._server.serve_forever, name="coordinator", daemon=True)
        reap = threading.Thread(target=self._reap_loop, name="reaper", daemon=True)
        self._threads = [serve, reap]
        for t in self._threads:
            t.start()
        log.info("coordinator listening on %s", self.address_text)
        return self

    def _reap_loop(self) -> None:
        while not self._closing.wait(self.reap_interval):
            ledger = self.ledger
            if ledger is not None:
                n = ledger.reap_timeouts()
                if n:
                    log.warning("re-queued %d timed-out job(s)", n)

    def close(self, grace: float = 0.5) -> None:
        """Tell polling workers to shut down, then stop serving."""
        self._closing.set()
        if grace > 0:
            time.sleep(grace)
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def __enter__(self) -> "Coordinator":
        return self.start() if self._server is None else self

    def __exit__(self, *exc) -> None:
        self.close()

    def progress(self) -> dict[str, int]:
        ledger = self.ledger
        if ledger is None:
            return {"pending": 0, "dispatched": 0, "done": 0, "failed": 0}
        return ledger.counters()

    def handle_message(self, msg: dict[str, Any]) -> dict[str, Any] | None:
        kind = msg["type"]
        worker_id = str(msg.get("worker_id", ""))
        if kind == proto.REGISTER:
            self._register(worker_id, float(msg.get("speed", 1.0)))
            return {"type": proto.ACK, **self.handshake}
        if kind == proto.HEARTBEAT:
            with self._lock:
                info = self.workers.get(worker_id)
                if info is not None:
                    info.last_heartbeat = time.monotonic()
            return None
        if kind == proto.JOB_REQUEST:
            if self._closing.is_set():
                return {"type": proto.SHUTDOWN}
            with self._lock:
                if worker_id not in self.workers:
                    # a worker reconnecting after a coordinator-side drop
                    self.workers[worker_id] = WorkerInfo(worker_id)
                ledger = self.ledger
            job = ledger.dispatch_next(worker_id) if ledger is not None else None
            return proto.job_message(job) if job is not None else {"type": proto.NO_WORK}
        if kind == proto.RESULT:
            ledger = self.ledger
            if ledger is None:
                return {"type": proto.ACK}
            rec = ledger.records.get(str(msg.get("job_id")))
            if rec is None:
                raise UnknownJob(str(msg.get("job_id")))
            result = proto.result_from_message(msg, rec.job.sample_id)
            outcome = ledger.report_result(worker_id, result)
            log.debug("%s from %s: %s", result.job_id, worker_id, outcome)
            return {"type": proto.ACK}
        log.debug("ignoring message type %r", kind)
        return None

    def _register(self, worker_id: str, speed: float) -> None:
        with self._lock:
            info = self.workers.setdefault(worker_id, WorkerInfo(worker_id, speed))
            info.speed = speed
            info.last_heartbeat = time.monotonic()
        log.info("worker %s registered (speed %.2f)", worker_id, speed)

    def submit(self, samples: SampleMatrix, seed: int = 0, tag: str = "") -> JobLedger:
        with self._lock:
            for info in self.workers.values():
                info.inflight.clear()
            self.ledger = JobLedger(
                make_jobs(samples, seed, tag),
                max_attempts=self.max_attempts,
                initial_timeout=self.initial_timeout,
                timeout_factor=self.timeout_factor,
                timeout_floor=self.timeout_floor,
                workers=self.workers,
                lock=self._lock,
            )
            return self.ledger

    def run_batch(
        self, samples: SampleMatrix, seed: int = 0, tag: str = "", timeout: float | None = None
    ) -> list[SimulationResult]:
        """Submit a batch and block until every job is Done or Failed."""
        ledger = self.submit(samples, seed, tag)
        if not ledger.wait(timeout):
            raise TimeoutError(f"batch {tag!r} incomplete after {timeout}s: {ledger.counters()}")
        return ledger.results()
