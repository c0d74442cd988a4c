"""Metrics, the structured event log, and asynchronous payload logging.

The event log is the platform's ground truth: every lifecycle transition,
request milestone, and autoscaler decision is appended as one record.  In
virtual-clock mode the serialized log is byte-identical across runs of the
same scenario and seed, which is what the determinism checks hash.

Payload logging captures request/response pairs for downstream monitoring
without ever blocking the serving path: a bounded ring buffer (drop-oldest)
feeds a single background drainer per sink.  Drops are accounted, not
raised.
"""

from __future__ import annotations

import asyncio
import json
import logging
from bisect import bisect_left
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

logger = logging.getLogger(__name__)


class TelemetryError(Exception):
    pass


class UnknownMetric(TelemetryError):
    pass


class MalformedEventLog(TelemetryError):
    pass


# -- event log ---------------------------------------------------------------


class EventLog:
    """Append-only structured log of platform events."""

    def __init__(self) -> None:
        self.records: list[dict[str, Any]] = []

    def emit(self, kind: str, t: float, **fields: Any) -> None:
        record = {"t": round(t, 9), "kind": kind}
        record.update(fields)
        self.records.append(record)

    def of_kind(self, *kinds: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] in kinds]

    def serialize(self) -> str:
        """One JSON record per line, keys sorted; stable across runs."""
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records)

    def write(self, path: Path) -> None:
        Path(path).write_text(self.serialize() + "\n")


def replica_timeline(records: Iterable[Mapping[str, Any]]) -> list[tuple[float, str, int]]:
    """Fold replica state transitions into (t, revision, ready_count) steps.

    The count is of replicas strictly in Ready state; a Ready replica that
    starts draining leaves the count at that instant.
    """
    ready: Counter[str] = Counter()
    steps: list[tuple[float, str, int]] = []
    for record in records:
        if not isinstance(record, Mapping) or "kind" not in record:
            raise MalformedEventLog(f"not an event record: {record!r}")
        if record["kind"] != "replica_state":
            continue
        try:
            t = record["t"]
            revision = record["revision"]
            old, new = record["from"], record["to"]
        except KeyError as exc:
            raise MalformedEventLog(f"replica_state record missing {exc}") from exc
        delta = (new == "ready") - (old == "ready")
        if delta:
            ready[revision] += delta
            steps.append((t, revision, ready[revision]))
    return steps


# -- metrics -----------------------------------------------------------------

#: log-spaced latency buckets: 1ms .. ~65s, doubling.
LATENCY_BUCKETS = tuple(0.001 * 2**i for i in range(17))


class Histogram:
    """Fixed-bucket histogram with deterministic quantile estimates.

    A quantile estimate is the upper bound of the bucket containing the
    target rank, so estimates bracket the true quantile within one bucket's
    width.
    """

    def __init__(self, buckets: tuple[float, ...] = LATENCY_BUCKETS):
        self.buckets = buckets
        self.counts = [0] * (len(buckets) + 1)
        self.total = 0
        self.sum = 0.0

    def observe(self, value: float) -> None:
        # le-bucket semantics: counts[i] holds buckets[i-1] < v <= buckets[i].
        self.counts[bisect_left(self.buckets, value)] += 1
        self.total += 1
        self.sum += value

    def quantile(self, q: float) -> float:
        """Upper bucket bound at quantile ``q``; 0.0 when empty."""
        if self.total == 0:
            return 0.0
        rank = q * self.total
        seen = 0
        for i, count in enumerate(self.counts):
            seen += count
            if seen >= rank and count:
                return self.buckets[i] if i < len(self.buckets) else float("inf")
        return float("inf")

    def quantile_bracket(self, q: float) -> tuple[float, float]:
        upper = self.quantile(q)
        if upper in (0.0, float("inf")):
            return (0.0, upper)
        idx = self.buckets.index(upper)
        return (0.0 if idx == 0 else self.buckets[idx - 1], upper)


class DiscreteHistogram:
    """Exact value histogram for small integer observations (batch sizes)."""

    def __init__(self) -> None:
        self.counts: Counter[int] = Counter()
        self.total = 0
        self.sum = 0.0

    def observe(self, value: int) -> None:
        self.counts[int(value)] += 1
        self.total += 1
        self.sum += value

    def mode(self) -> int | None:
        if not self.counts:
            return None
        # Deterministic tie-break: smallest value among the most frequent.
        best = max(self.counts.values())
        return min(v for v, c in self.counts.items() if c == best)


class MetricsRegistry:
    """Counters, gauges, and histograms with a text exposition."""

    def __init__(self) -> None:
        self._counters: dict[str, float] = {}
        self._gauges: dict[str, float] = {}
        self._histograms: dict[str, Histogram | DiscreteHistogram] = {}

    # registration -----------------------------------------------------------

    def counter(self, name: str) -> None:
        self._counters.setdefault(name, 0)

    def gauge(self, name: str) -> None:
        self._gauges.setdefault(name, 0)

    def histogram(self, name: str, buckets: tuple[float, ...] = LATENCY_BUCKETS) -> Histogram:
        return self._histograms.setdefault(name, Histogram(buckets))  # type: ignore[return-value]

    def discrete_histogram(self, name: str) -> DiscreteHistogram:
        return self._histograms.setdefault(name, DiscreteHistogram())  # type: ignore[return-value]

    # hot path ----------------------------------------------------------------

    def inc(self, name: str, amount: float = 1) -> None:
        if name not in self._counters:
            raise UnknownMetric(name)
        self._counters[name] += amount

    def set_gauge(self, name: str, value: float) -> None:
        if name not in self._gauges:
            raise UnknownMetric(name)
        self._gauges[name] = value

    def observe(self, name: str, value: float) -> None:
        if name not in self._histograms:
            raise UnknownMetric(name)
        self._histograms[name].observe(value)

    # reads -------------------------------------------------------------------

    def counter_value(self, name: str) -> float:
        if name not in self._counters:
            raise UnknownMetric(name)
        return self._counters[name]

    def gauge_value(self, name: str) -> float:
        if name not in self._gauges:
            raise UnknownMetric(name)
        return self._gauges[name]

    def get_histogram(self, name: str) -> Histogram | DiscreteHistogram:
        if name not in self._histograms:
            raise UnknownMetric(name)
        return self._histograms[name]

    def render(self) -> str:
        """Stable-ordered text exposition of every registered metric."""
        lines: list[str] = []
        for name in sorted(self._counters):
            lines.append(f"{name} {self._counters[name]:g}")
        for name in sorted(self._gauges):
            lines.append(f"{name} {self._gauges[name]:g}")
        for name in sorted(self._histograms):
            hist = self._histograms[name]
            lines.append(f"{name}_count {hist.total}")
            lines.append(f"{name}_sum {hist.sum:g}")
            if isinstance(hist, Histogram):
                for q, label in ((0.5, "p50"), (0.95, "p95"), (0.99, "p99")):
                    lines.append(f"{name}_{label} {hist.quantile(q):g}")
            else:
                for value in sorted(hist.counts):
                    lines.append(f'{name}{{value="{value}"}} {hist.counts[value]}')
        return "\n".join(lines) + "\n"


def platform_metrics() -> MetricsRegistry:
    """Registry pre-populated with the platform's metric families."""
    registry = MetricsRegistry()
    for name in (
        "requests_total",
        "errors_total",
        "shadow_total",
        "shadow_errors_total",
        "payload_dropped_total",
        "payload_emitted_total",
        "cold_starts_total",
    ):
        registry.counter(name)
    for name in ("ready_replicas", "in_flight", "buffered"):
        registry.gauge(name)
    registry.histogram("request_latency_seconds")
    registry.histogram("startup_duration_seconds")
    registry.histogram("batch_wait_seconds")
    registry.discrete_histogram("batch_size")
    return registry


# -- payload logging ----------------------------------------------------------


@dataclass(frozen=True)
class PayloadRecord:
    request_id: str
    service: str
    revision: str
    timestamp: float
    request: Any
    response: Any = None
    error: str | None = None
    latency: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "service": self.service,
            "revision": self.revision,
            "timestamp": self.timestamp,
            "request": self.request,
            "response": self.response,
            "error": self.error,
            "latency": self.latency,
        }


class PayloadSink:
    """Destination for drained payload records."""

    async def write(self, record: PayloadRecord) -> None:
        raise NotImplementedError


class FilePayloadSink(PayloadSink):
    """Newline-delimited JSON records appended to a local file."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    async def write(self, record: PayloadRecord) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")


class NullPayloadSink(PayloadSink):
    """Discards records; useful when logging is on but no path is set."""

    async def write(self, record: PayloadRecord) -> None:
        pass


@dataclass
class PayloadLogger:
    """Bounded, drop-oldest buffer with one background drainer.

    ``log`` is O(1) and never blocks.  A record handed to the sink still
    counts toward capacity until the write completes, so with a fully
    stalled sink exactly ``capacity`` submissions are retained and the rest
    are dropped oldest-first.
    """

    sink: PayloadSink
    metrics: MetricsRegistry
    capacity: int = 1024
    enabled: bool = True
    _buffer: deque[PayloadRecord] = field(default_factory=deque)
    _in_hand: int = 0
    _wake: asyncio.Event = field(default_factory=asyncio.Event)
    _task: asyncio.Task | None = None
    _closing: bool = False

    def log(self, record: PayloadRecord) -> bool:
        if not self.enabled:
            return False
        if len(self._buffer) + self._in_hand >= self.capacity:
            self._buffer.popleft()
            self.metrics.inc("payload_dropped_total")
        self._buffer.append(record)
        self._wake.set()
        return True

    def start(self) -> None:
        if self._task is None:
            self._task = asyncio.get_running_loop().create_task(
                self._drain(), name="payload-drainer"
            )

    async def _drain(self) -> None:
        while True:
            await self._wake.wait()
            self._wake.clear()
            while self._buffer:
                record = self._buffer.popleft()
                self._in_hand = 1
                try:
                    await self.sink.write(record)
                    self.metrics.inc("payload_emitted_total")
                finally:
                    self._in_hand = 0
            if self._closing:
                return

    async def close(self) -> None:
        if self._task is None:
            return
        self._closing = True
        self._wake.set()
        try:
            await asyncio.wait_for(asyncio.shield(self._task), timeout=5.0)
        except asyncio.TimeoutError:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        self._task = None
