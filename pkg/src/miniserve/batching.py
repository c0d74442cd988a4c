"""Dynamic request batching in front of a predictor.

Requests accumulate in one pending batch per replica until the batch is
full or the flush timeout (anchored at the first entry's arrival) expires;
the batch then executes as a single forward pass and responses fan back
out in arrival order.  A full batch that cannot execute yet (slot busy)
closes and queues; the whole batch occupies one breaker unit, since the
breaker models server slots.
"""

from __future__ import annotations

import asyncio
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Union

from miniserve.clock import Clock

logger = logging.getLogger(__name__)


class BatchShapeMismatch(Exception):
    pass


@dataclass(frozen=True)
class BatcherConfig:
    max_batch_size: int = 1
    max_latency: float = 0.0  # flush timeout, seconds
    enabled: bool = False

    def __post_init__(self):
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")
        if self.max_latency < 0:
            raise ValueError("max_latency must be >= 0")


@dataclass
class BatchEntry:
    request_id: str
    payload: Any
    enqueued_at: float
    ticket: "BatchTicket"


@dataclass
class PendingBatch:
    opened_at: float
    entries: list[BatchEntry] = field(default_factory=list)


class ExecuteNow:
    def __repr__(self):
        return "ExecuteNow()"

    def __eq__(self, other):
        return isinstance(other, ExecuteNow)


@dataclass(frozen=True)
class WaitUntil:
    at: float


FlushAction = Union[ExecuteNow, WaitUntil]


def flush_decision(batch: PendingBatch, cfg: BatcherConfig, now: float) -> FlushAction:
    """Execute when full or past the timeout; otherwise wait out the timeout."""
    if len(batch.entries) >= cfg.max_batch_size:
        return ExecuteNow()
    if now >= batch.opened_at + cfg.max_latency:
        return ExecuteNow()
    return WaitUntil(batch.opened_at + cfg.max_latency)


@dataclass
class BatchResult:
    output: Any
    batch_size: int
    waited: float  # enqueue -> execution start


class BatchTicket:
    """Awaitable completion handle for one submitted request."""

    def __init__(self):
        self._future: asyncio.Future = asyncio.get_running_loop().create_future()

    def resolve(self, result: BatchResult) -> None:
        if not self._future.done():
            self._future.set_result(result)

    def fail(self, exc: BaseException) -> None:
        if not self._future.done():
            self._future.set_exception(exc)

    def __await__(self):
        return self._future.__await__()


def split_responses(
    batch_output: list[Any], batch: PendingBatch, exec_started: float
) -> list[BatchResult]:
    """Deliver the i-th output to the i-th entry's ticket."""
    if len(batch_output) != len(batch.entries):
        exc = BatchShapeMismatch(
            f"{len(batch_output)} outputs for {len(batch.entries)} entries"
        )
        for entry in batch.entries:
            entry.ticket.fail(exc)
        raise exc
    results = []
    for entry, output in zip(batch.entries, batch_output):
        result = BatchResult(
            output=output,
            batch_size=len(batch.entries),
            waited=exec_started - entry.enqueued_at,
        )
        entry.ticket.resolve(result)
        results.append(result)
    return results


class Overflow(Exception):
    """Batcher backlog is full; the caller maps this to Overloaded."""


class BatchAborted(Exception):
    """The replica stopped while this request sat in a batch."""


class Batcher:
    """Per-replica batch assembler and serial executor.

    ``run_batch`` performs the model forward pass for an assembled batch.
    ``acquire_slot``/``release_slot`` bracket the execution with the
    replica's breaker so the batch counts as one in-flight unit.
    """

    def __init__(
        self,
        cfg: BatcherConfig,
        clock: Clock,
        run_batch: Callable[[PendingBatch], Awaitable[list[Any]]],
        acquire_slot: Callable[[], Awaitable[None]],
        release_slot: Callable[[], None],
        max_backlog_batches: int = 10,
        on_executed: Callable[[PendingBatch, list[BatchResult]], None] | None = None,
    ):
        self.cfg = cfg
        self.clock = clock
        self.run_batch = run_batch
        self.acquire_slot = acquire_slot
        self.release_slot = release_slot
        self.max_backlog_batches = max_backlog_batches
        self.on_executed = on_executed
        self.pending: PendingBatch | None = None
        self.closed: deque[PendingBatch] = deque()
        self._wake = asyncio.Event()
        self._task: asyncio.Task | None = None

    @property
    def buffered_entries(self) -> int:
        count = sum(len(b.entries) for b in self.closed)
        if self.pending is not None:
            count += len(self.pending.entries)
        return count

    def submit(self, request_id: str, payload: Any, now: float) -> BatchTicket:
        if self.buffered_entries >= self.cfg.max_batch_size * (self.max_backlog_batches + 1):
            raise Overflow("batch backlog full")
        if self.pending is None:
            self.pending = PendingBatch(opened_at=now)
        ticket = BatchTicket()
        self.pending.entries.append(
            BatchEntry(request_id=request_id, payload=payload, enqueued_at=now, ticket=ticket)
        )
        if len(self.pending.entries) >= self.cfg.max_batch_size:
            self._close_pending()
        self._wake.set()
        return ticket

    def _close_pending(self) -> None:
        if self.pending is not None and self.pending.entries:
            self.closed.append(self.pending)
            self.pending = None

    def start(self) -> asyncio.Task:
        if self._task is None:
            self._task = asyncio.get_running_loop().create_task(
                self._run(), name="batcher"
            )
        return self._task

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None
        self.abort_buffered()

    def abort_buffered(self) -> None:
        """Fail every not-yet-executed ticket; used when the replica stops."""
        exc = BatchAborted("replica stopped before the batch executed")
        for batch in [*self.closed, *( [self.pending] if self.pending else [] )]:
            for entry in batch.entries:
                entry.ticket.fail(exc)
        self.closed.clear()
        self.pending = None

    async def _run(self) -> None:
        while True:
            await self._wake.wait()
            self._wake.clear()
            while self.closed or self.pending is not None:
                if not self.closed:
                    action = flush_decision(self.pending, self.cfg, self.clock.now())
                    if isinstance(action, WaitUntil):
                        delay = action.at - self.clock.now()
                        try:
                            await asyncio.wait_for(self._wake.wait(), timeout=delay)
                        except asyncio.TimeoutError:
                            pass
                        self._wake.clear()
                        continue
                    self._close_pending()
                batch = self.closed.popleft()
                await self._execute(batch)

    async def _execute(self, batch: PendingBatch) -> None:
        try:
            await self.acquire_slot()
        except asyncio.CancelledError:
            for entry in batch.entries:
                entry.ticket.fail(BatchAborted("replica stopped mid-batch"))
            raise
        exec_started = self.clock.now()
        try:
            outputs = await self.run_batch(batch)
        except asyncio.CancelledError:
            for entry in batch.entries:
                entry.ticket.fail(BatchAborted("replica stopped mid-batch"))
            raise
        except Exception as exc:
            for entry in batch.entries:
                entry.ticket.fail(exc)
            return
        finally:
            self.release_slot()
        results = split_responses(outputs, batch, exec_started)
        if self.on_executed is not None:
            self.on_executed(batch, results)
