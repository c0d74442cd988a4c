"""Time sources for the platform.

Every component reads time and sleeps through an injected :class:`Clock`
instead of touching ``time`` directly.  The same component code therefore
runs in two modes:

* **real mode** -- the standard asyncio event loop; sleeps take wall time.
* **virtual mode** -- :class:`VirtualClockEventLoop`, a discrete-event loop
  whose clock jumps straight to the next scheduled callback.  A full
  platform run takes milliseconds of wall time and is fully deterministic:
  callbacks due at the same virtual instant fire in (priority, sequence)
  order, so two runs of the same program produce identical event traces.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import logging
from collections import deque
from typing import Any, Awaitable, Callable, Protocol, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


class Clock(Protocol):
    """Minimal time surface the platform components depend on."""

    def now(self) -> float:
        ...

    async def sleep(self, seconds: float) -> None:
        ...


class LoopClock:
    """Clock backed by whatever event loop is currently running.

    On the virtual loop this reads virtual seconds (starting at 0.0); on a
    real loop it reads the loop's monotonic clock shifted by ``origin`` so
    that platform timestamps also start near zero.
    """

    def __init__(self, origin: float = 0.0):
        self._origin = origin

    @classmethod
    def anchored(cls) -> "LoopClock":
        """Clock whose zero point is the moment of this call (real mode)."""
        return cls(origin=asyncio.get_running_loop().time())

    def now(self) -> float:
        return asyncio.get_running_loop().time() - self._origin

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(seconds if seconds > 0 else 0)


class VirtualClockEventLoop(asyncio.AbstractEventLoop):
    """Deterministic discrete-event asyncio loop.

    Supports the subset of the event-loop surface that tasks, futures and
    the asyncio synchronization primitives use: ``call_soon``/``call_later``/
    ``call_at``, ``time``, task and future factories, and the run/stop
    lifecycle.  There is no I/O support; in simulation, network hops are
    in-process calls.

    Ready callbacks run FIFO.  Timers are ordered by
    ``(when, priority, sequence)``; priority is currently a constant so
    same-instant timers fire in scheduling order.
    """

    def __init__(self) -> None:
        self._now = 0.0
        self._sequence = itertools.count()
        self._scheduled: list[tuple[float, int, int, asyncio.TimerHandle]] = []
        self._ready: deque[asyncio.Handle] = deque()
        self._running = False
        self._stopping = False
        self._closed = False
        self._debug = False
        self._exception_handler: Callable[..., None] | None = None
        #: contexts passed to call_exception_handler; inspected by tests and
        #: the scenario runner to surface crashed background tasks.
        self.unhandled_errors: list[dict[str, Any]] = []

    # -- time ------------------------------------------------------------

    def time(self) -> float:
        return self._now

    # -- scheduling ------------------------------------------------------

    def call_soon(self, callback, *args, context=None) -> asyncio.Handle:
        self._check_closed()
        handle = asyncio.Handle(callback, args, self, context)
        self._ready.append(handle)
        return handle

    # Single-threaded loop: thread-safe variant is the plain one.
    call_soon_threadsafe = call_soon

    def call_later(self, delay, callback, *args, context=None) -> asyncio.TimerHandle:
        return self.call_at(self._now + delay, callback, *args, context=context)

    def call_at(self, when, callback, *args, context=None) -> asyncio.TimerHandle:
        self._check_closed()
        timer = asyncio.TimerHandle(when, callback, args, self, context)
        heapq.heappush(self._scheduled, (when, 0, next(self._sequence), timer))
        return timer

    def _timer_handle_cancelled(self, handle) -> None:
        # Cancelled timers are skipped when popped.
        pass

    # -- factories -------------------------------------------------------

    def create_future(self) -> asyncio.Future:
        return asyncio.Future(loop=self)

    def create_task(self, coro, *, name=None) -> asyncio.Task:
        self._check_closed()
        return asyncio.Task(coro, loop=self, name=name)

    # -- run lifecycle ---------------------------------------------------

    def run_until_complete(self, future):
        fut = asyncio.ensure_future(future, loop=self)
        fut.add_done_callback(self._stop_on_completion)
        try:
            self.run_forever()
        finally:
            fut.remove_done_callback(self._stop_on_completion)
        if not fut.done():
            raise RuntimeError(
                "virtual event loop ran out of work before the future completed"
            )
        return fut.result()

    def run_forever(self) -> None:
        self._check_closed()
        if self._running:
            raise RuntimeError("loop is already running")
        self._running = True
        self._stopping = False
        asyncio.events._set_running_loop(self)
        try:
            while not self._stopping:
                if not self._step():
                    break
        finally:
            self._running = False
            self._stopping = False
            asyncio.events._set_running_loop(None)

    def _step(self) -> bool:
        """Run one batch of ready callbacks, advancing time if needed."""
        if not self._ready:
            while self._scheduled and self._scheduled[0][3]._cancelled:
                heapq.heappop(self._scheduled)
            if not self._scheduled:
                return False
            when = self._scheduled[0][0]
            if when > self._now:
                self._now = when
            while self._scheduled and self._scheduled[0][0] <= self._now:
                _, _, _, timer = heapq.heappop(self._scheduled)
                if not timer._cancelled:
                    self._ready.append(timer)
        for _ in range(len(self._ready)):
            handle = self._ready.popleft()
            if not handle._cancelled:
                handle._run()
        return True

    def _stop_on_completion(self, _future) -> None:
        self.stop()

    def stop(self) -> None:
        self._stopping = True

    def is_running(self) -> bool:
        return self._running

    def is_closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        if self._running:
            raise RuntimeError("cannot close a running loop")
        self._closed = True
        self._ready.clear()
        self._scheduled.clear()

    def _check_closed(self) -> None:
        if self._closed:
            raise RuntimeError("event loop is closed")

    async def shutdown_asyncgens(self) -> None:
        pass

    async def shutdown_default_executor(self) -> None:
        pass

    # -- error reporting ---------------------------------------------------

    def get_debug(self) -> bool:
        return self._debug

    def set_debug(self, enabled: bool) -> None:
        self._debug = enabled

    def set_exception_handler(self, handler) -> None:
        self._exception_handler = handler

    def get_exception_handler(self):
        return self._exception_handler

    def default_exception_handler(self, context) -> None:
        self.unhandled_errors.append(context)
        logger.error("unhandled error in virtual loop: %s", context.get("message"),
                     exc_info=context.get("exception"))

    def call_exception_handler(self, context) -> None:
        if self._exception_handler is not None:
            self._exception_handler(self, context)
        else:
            self.default_exception_handler(context)


def run_simulation(main: Awaitable[T]) -> T:
    """Run ``main`` to completion on a fresh virtual-clock loop.

    Analogous to :func:`asyncio.run`: leftover tasks are cancelled and
    retired before the loop closes.  Raises if any background task died
    with an unreported exception during the run.
    """
    loop = VirtualClockEventLoop()
    try:
        result = loop.run_until_complete(main)
        _cancel_pending(loop)
        if loop.unhandled_errors:
            first = loop.unhandled_errors[0]
            raise RuntimeError(
                f"background task failed during simulation: {first.get('message')}"
            ) from first.get("exception")
        return result
    finally:
        _cancel_pending(loop)
        loop.close()


def _cancel_pending(loop: VirtualClockEventLoop) -> None:
    pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for task in pending:
        task.cancel()
    if pending:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
