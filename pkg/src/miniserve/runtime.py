"""One model-server replica: lifecycle, admission control, data path.

A replica moves Pending -> Initializing (artifact fetch, model load) ->
Ready -> Draining -> Stopped, falling to Stopped on failure.  The
queue-proxy role is an in-process breaker: a hard cap on simultaneously
executing requests plus a bounded wait queue, with live in-flight metrics.
When batching is enabled the assembled batch occupies a single breaker
unit; individually admitted requests are tracked separately in
``outstanding`` for load balancing and autoscaler concurrency.
"""

from __future__ import annotations

import asyncio
import hashlib
import itertools
import logging
import random
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

from miniserve import storage as storage_mod
from miniserve.batching import BatchAborted, Batcher, BatcherConfig, Overflow, PendingBatch
from miniserve.clock import Clock
from miniserve.predictors import load_predictor
from miniserve.specs import PredictorSpec, Revision
from miniserve.telemetry import EventLog, MetricsRegistry

logger = logging.getLogger(__name__)

DEFAULT_CONTAINER_CONCURRENCY = 1
DEFAULT_QUEUE_CAPACITY = 10


class Overloaded(Exception):
    """Breaker queue full; the request was rejected and may be retried."""


class NotReady(Exception):
    """Replica is not accepting new requests in its current state."""


class StartupFailed(Exception):
    pass


class ReplicaState(str, Enum):
    PENDING = "pending"
    INITIALIZING = "initializing"
    READY = "ready"
    DRAINING = "draining"
    STOPPED = "stopped"


_VALID_TRANSITIONS = {
    ReplicaState.PENDING: {ReplicaState.INITIALIZING, ReplicaState.STOPPED},
    ReplicaState.INITIALIZING: {ReplicaState.READY, ReplicaState.STOPPED},
    ReplicaState.READY: {ReplicaState.DRAINING, ReplicaState.STOPPED},
    ReplicaState.DRAINING: {ReplicaState.STOPPED},
    ReplicaState.STOPPED: set(),
}


class Breaker:
    """Concurrency cap with a bounded FIFO wait queue.

    Slots are handed off directly from releaser to the longest waiter, so
    ``in_flight`` never exceeds ``container_concurrency`` at any instant.
    """

    def __init__(
        self,
        container_concurrency: int = DEFAULT_CONTAINER_CONCURRENCY,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
    ):
        self.container_concurrency = container_concurrency
        self.queue_capacity = queue_capacity
        self.in_flight = 0
        self.queued = 0
        self._waiters: deque[asyncio.Future] = deque()

    def try_acquire(self) -> bool:
        if self.in_flight < self.container_concurrency and not self._waiters:
            self.in_flight += 1
            return True
        return False

    async def acquire(self) -> None:
        if self.try_acquire():
            return
        if self.queued >= self.queue_capacity:
            raise Overloaded(
                f"breaker queue full ({self.queued}/{self.queue_capacity})"
            )
        fut = asyncio.get_running_loop().create_future()
        self._waiters.append(fut)
        self.queued += 1
        try:
            await fut
        except asyncio.CancelledError:
            if fut.cancelled() or not fut.done():
                self.queued -= 1
                try:
                    self._waiters.remove(fut)
                except ValueError:
                    pass
            else:
                # Slot was handed over concurrently with cancellation.
                self.release()
            raise

    def release(self) -> None:
        while self._waiters:
            fut = self._waiters.popleft()
            if fut.cancelled():
                continue
            self.queued -= 1
            fut.set_result(None)  # slot transfers; in_flight unchanged
            return
        self.in_flight -= 1


@dataclass(frozen=True)
class StatSample:
    replica_id: str
    t: float
    in_flight: int
    queued: int

    @property
    def concurrency(self) -> int:
        return self.in_flight + self.queued


@dataclass(frozen=True)
class DrainResult:
    completed: bool
    remaining: int


@dataclass(frozen=True)
class ReplicaResponse:
    output: list[Any]
    batch_size: int
    waited: float


@dataclass(frozen=True)
class ReplicaConfig:
    model_root: Path
    container_concurrency: int = DEFAULT_CONTAINER_CONCURRENCY
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    batching: BatcherConfig = BatcherConfig()
    startup_seconds: float | None = None
    seed: int = 0

    @classmethod
    def from_predictor(
        cls,
        predictor: PredictorSpec,
        annotations: Mapping[str, str],
        model_root: Path,
        seed: int = 0,
    ) -> "ReplicaConfig":
        resources = predictor.resources
        batching = BatcherConfig()
        if "batching.maxSize" in annotations:
            batching = BatcherConfig(
                max_batch_size=int(annotations["batching.maxSize"]),
                max_latency=float(annotations.get("batching.maxLatencyMs", 0)) / 1000.0,
                enabled=True,
            )
        return cls(
            model_root=Path(model_root),
            container_concurrency=resources.concurrency or DEFAULT_CONTAINER_CONCURRENCY,
            queue_capacity=(
                resources.queue_capacity
                if resources.queue_capacity is not None
                else DEFAULT_QUEUE_CAPACITY
            ),
            batching=batching,
            startup_seconds=resources.startup_seconds,
            seed=seed,
        )


def _replica_rng(seed: int, replica_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{replica_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class ReplicaHandle:
    """A running (or starting, or stopping) model-server instance."""

    def __init__(
        self,
        replica_id: str,
        revision: Revision,
        config: ReplicaConfig,
        clock: Clock,
        event_log: EventLog,
        storage: storage_mod.StorageInitializer,
        metrics: MetricsRegistry | None = None,
        on_ready: Callable[["ReplicaHandle"], None] | None = None,
        on_stopped: Callable[["ReplicaHandle"], None] | None = None,
    ):
        self.id = replica_id
        self.revision = revision
        self.config = config
        self.clock = clock
        self.event_log = event_log
        self.storage = storage
        self.metrics = metrics
        self.on_ready = on_ready
        self.on_stopped = on_stopped

        self.state = ReplicaState.PENDING
        self.breaker = Breaker(config.container_concurrency, config.queue_capacity)
        self.predictor = None
        self.batcher: Batcher | None = None
        self.started_at: float | None = None
        self.ready_at: float | None = None
        self.stopped_cause: str | None = None
        self.startup_task: asyncio.Task | None = None

        #: individually admitted, not yet finished requests (batched or not)
        self.outstanding = 0
        self.admitted = 0
        self.completed = 0
        self.rejected = 0
        self.failed = 0

        self._batch_seq = itertools.count(1)
        self._idle = asyncio.Event()
        self._idle.set()
        self.event_log.emit(
            "replica_state", clock.now(), replica=self.id,
            revision=revision.id, **{"from": "none", "to": self.state.value},
        )

    # -- lifecycle ---------------------------------------------------------

    def _set_state(self, new: ReplicaState, cause: str | None = None) -> None:
        if new not in _VALID_TRANSITIONS[self.state]:
            raise RuntimeError(f"invalid transition {self.state.value} -> {new.value}")
        old, self.state = self.state, new
        fields: dict[str, Any] = {"from": old.value, "to": new.value}
        if cause:
            fields["cause"] = cause
        self.event_log.emit(
            "replica_state", self.clock.now(), replica=self.id,
            revision=self.revision.id, **fields,
        )
        if new is ReplicaState.READY and self.on_ready:
            self.on_ready(self)
        if new is ReplicaState.STOPPED:
            self.stopped_cause = cause
            if self.batcher is not None:
                self.batcher.abort_buffered()
            if self.on_stopped:
                self.on_stopped(self)

    async def startup(self) -> None:
        """Fetch artifacts, load the model, go Ready.  Runs as a task."""
        self.started_at = self.clock.now()
        self._set_state(ReplicaState.INITIALIZING)
        try:
            model_dir = self.config.model_root / self.id
            manifest = await self.storage.fetch(
                self.revision.predictor.storage_uri,
                model_dir,
                self.clock,
                simulated_seconds=self.config.startup_seconds,
            )
            if not storage_mod.verify(manifest):
                raise StartupFailed("artifact verification failed after fetch")
            self.predictor = load_predictor(
                self.revision.predictor.runtime_kind,
                model_dir,
                _replica_rng(self.config.seed, self.id),
            )
            if self.predictor.load_seconds > 0:
                await self.clock.sleep(self.predictor.load_seconds)
            if self.config.batching.enabled:
                self.batcher = Batcher(
                    self.config.batching,
                    self.clock,
                    run_batch=self._run_batch,
                    acquire_slot=self.breaker.acquire,
                    release_slot=self.breaker.release,
                    max_backlog_batches=self.config.queue_capacity,
                    on_executed=self._batch_executed,
                )
                self.batcher.start()
            self.ready_at = self.clock.now()
            if self.metrics is not None:
                self.metrics.observe(
                    "startup_duration_seconds", self.ready_at - self.started_at
                )
            self._set_state(ReplicaState.READY)
        except asyncio.CancelledError:
            if self.state is not ReplicaState.STOPPED:
                self._set_state(ReplicaState.STOPPED, cause="startup cancelled")
            raise
        except Exception as exc:
            logger.warning("replica %s startup failed: %s", self.id, exc)
            self._set_state(ReplicaState.STOPPED, cause=f"StartupFailed: {exc}")

    async def drain(self, deadline: float) -> DrainResult:
        """Stop admitting, wait for in-flight work, then stop.

        Timing out is a result, not an error; remaining requests are cut
        off when the replica stops.
        """
        if self.state is ReplicaState.STOPPED:
            return DrainResult(completed=True, remaining=0)
        if self.state in (ReplicaState.PENDING, ReplicaState.INITIALIZING):
            if self.startup_task is not None and not self.startup_task.done():
                self.startup_task.cancel()
                try:
                    await self.startup_task
                except asyncio.CancelledError:
                    pass
            if self.state is not ReplicaState.STOPPED:
                self._set_state(ReplicaState.STOPPED, cause="stopped before ready")
            return DrainResult(completed=True, remaining=0)
        if self.state is ReplicaState.READY:
            self._set_state(ReplicaState.DRAINING)
        remaining = 0
        if self.outstanding > 0:
            try:
                await asyncio.wait_for(self._idle.wait(), timeout=deadline)
            except asyncio.TimeoutError:
                remaining = self.outstanding
        if self.batcher is not None:
            await self.batcher.stop()
        self._set_state(
            ReplicaState.STOPPED,
            cause=None if remaining == 0 else f"drain timed out ({remaining} in flight)",
        )
        return DrainResult(completed=remaining == 0, remaining=remaining)

    # -- data path -----------------------------------------------------------

    async def handle_request(self, request_id: str, payload: Any) -> ReplicaResponse:
        """Admit one request through the breaker (and batcher) to the model."""
        if self.state is not ReplicaState.READY:
            raise NotReady(f"replica {self.id} is {self.state.value}")
        self.admitted += 1
        self._track_outstanding(+1)
        try:
            if self.batcher is not None:
                return await self._handle_batched(request_id, payload)
            return await self._handle_direct(request_id, payload)
        finally:
            self._track_outstanding(-1)

    async def _handle_direct(self, request_id: str, payload: Any) -> ReplicaResponse:
        enqueued = self.clock.now()
        try:
            await self.breaker.acquire()
        except Overloaded:
            self.rejected += 1
            self.event_log.emit(
                "request_rejected", self.clock.now(), request=request_id,
                replica=self.id, revision=self.revision.id, reason="overloaded",
            )
            raise
        exec_started = self.clock.now()
        self.event_log.emit(
            "request_start", exec_started, request=request_id,
            replica=self.id, revision=self.revision.id, slot=request_id,
        )
        try:
            outputs = await self.predictor.predict([payload], self.clock)
        except Exception:
            self.failed += 1
            raise
        finally:
            self.breaker.release()
            self.event_log.emit(
                "request_finish", self.clock.now(), request=request_id,
                replica=self.id, revision=self.revision.id, slot=request_id,
            )
        self.completed += 1
        return ReplicaResponse(
            output=outputs[0], batch_size=1, waited=exec_started - enqueued
        )

    async def _handle_batched(self, request_id: str, payload: Any) -> ReplicaResponse:
        try:
            ticket = self.batcher.submit(request_id, payload, self.clock.now())
        except Overflow as exc:
            self.rejected += 1
            self.event_log.emit(
                "request_rejected", self.clock.now(), request=request_id,
                replica=self.id, revision=self.revision.id, reason="overloaded",
            )
            raise Overloaded(str(exc)) from exc
        try:
            result = await ticket
        except BatchAborted as exc:
            raise NotReady(f"replica {self.id} stopped while batch pending") from exc
        except Exception:
            self.failed += 1
            raise
        self.completed += 1
        return ReplicaResponse(
            output=result.output, batch_size=result.batch_size, waited=result.waited
        )

    async def _run_batch(self, batch: PendingBatch) -> list[Any]:
        slot = f"{self.id}/b{next(self._batch_seq)}"
        now = self.clock.now()
        for entry in batch.entries:
            self.event_log.emit(
                "request_start", now, request=entry.request_id,
                replica=self.id, revision=self.revision.id, slot=slot,
            )
        try:
            return await self.predictor.predict(
                [entry.payload for entry in batch.entries], self.clock
            )
        finally:
            done = self.clock.now()
            for entry in batch.entries:
                self.event_log.emit(
                    "request_finish", done, request=entry.request_id,
                    replica=self.id, revision=self.revision.id, slot=slot,
                )

    def _batch_executed(self, batch: PendingBatch, results) -> None:
        if self.metrics is None:
            return
        self.metrics.observe("batch_size", len(batch.entries))
        for result in results:
            self.metrics.observe("batch_wait_seconds", result.waited)

    def _track_outstanding(self, delta: int) -> None:
        self.outstanding += delta
        if self.outstanding == 0:
            self._idle.set()
        else:
            self._idle.clear()

    # -- observability ---------------------------------------------------------

    def report_stats(self, now: float) -> StatSample:
        if self.state is ReplicaState.STOPPED:
            raise NotReady(f"replica {self.id} is stopped")
        return StatSample(
            replica_id=self.id, t=now,
            in_flight=self.breaker.in_flight, queued=self.breaker.queued,
        )

    @property
    def load(self) -> int:
        """Admitted-but-unfinished individual requests; replica pick key."""
        return self.outstanding

    def __repr__(self):
        return f"ReplicaHandle({self.id}, {self.state.value}, load={self.outstanding})"


def start_replica(
    revision: Revision,
    config: ReplicaConfig,
    *,
    replica_id: str,
    clock: Clock,
    event_log: EventLog,
    storage: storage_mod.StorageInitializer,
    metrics: MetricsRegistry | None = None,
    on_ready: Callable[[ReplicaHandle], None] | None = None,
    on_stopped: Callable[[ReplicaHandle], None] | None = None,
) -> ReplicaHandle:
    """Create a replica handle and kick off its startup task."""
    handle = ReplicaHandle(
        replica_id=replica_id,
        revision=revision,
        config=config,
        clock=clock,
        event_log=event_log,
        storage=storage,
        metrics=metrics,
        on_ready=on_ready,
        on_stopped=on_stopped,
    )
    handle.startup_task = asyncio.get_running_loop().create_task(
        handle.startup(), name=f"startup-{replica_id}"
    )
    return handle
