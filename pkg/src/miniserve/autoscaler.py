"""Request-based (concurrency) autoscaling per revision.

The decision signal is in-flight requests: being served but not yet
responded to, including requests buffered at the activator while a
revision sits at zero.  No CPU, GPU, or latency inputs exist anywhere in
the decision path; that absence is asserted by tests.

Desired replicas = ceil(average concurrency / target), where the average
is time-weighted over a long stable window, or over a short panic window
when load spikes.  Panic mode never scales down.  Removing the last
replica additionally requires the desired count to have been zero
continuously for a grace period with nothing buffered.
"""

from __future__ import annotations

import asyncio
import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Union

from miniserve.clock import Clock
from miniserve.runtime import StatSample
from miniserve.telemetry import EventLog

logger = logging.getLogger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class AutoscalerConfig:
    target_concurrency: float = 1.0
    stable_window: float = 60.0
    panic_window: float = 6.0
    panic_threshold: float = 2.0
    scale_to_zero_grace: float = 30.0
    tick: float = 2.0
    max_scale_up_rate: float = 10.0
    min_replicas: int = 0
    max_replicas: int = 20
    sample_period: float = 1.0

    def __post_init__(self):
        if min(self.target_concurrency, self.stable_window, self.panic_window,
               self.panic_threshold, self.scale_to_zero_grace, self.tick,
               self.max_scale_up_rate, self.sample_period) <= 0:
            raise ValueError("autoscaler parameters must be positive")
        if self.panic_window > self.stable_window:
            raise ValueError("panic_window must not exceed stable_window")
        if not 0 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 0 <= min_replicas <= max_replicas")


_ANNOTATION_FIELDS: dict[str, tuple[str, Callable]] = {
    "autoscaling.target": ("target_concurrency", float),
    "autoscaling.stableWindowSeconds": ("stable_window", float),
    "autoscaling.panicWindowSeconds": ("panic_window", float),
    "autoscaling.panicThreshold": ("panic_threshold", float),
    "autoscaling.scaleToZeroGraceSeconds": ("scale_to_zero_grace", float),
    "autoscaling.tickSeconds": ("tick", float),
    "autoscaling.maxScaleUpRate": ("max_scale_up_rate", float),
    "autoscaling.minReplicas": ("min_replicas", int),
    "autoscaling.maxReplicas": ("max_replicas", int),
}


def config_from_annotations(
    annotations: Mapping[str, str], base: AutoscalerConfig = AutoscalerConfig()
) -> AutoscalerConfig:
    """Apply per-service ``autoscaling.*`` annotation overrides."""
    overrides = {}
    for key, (fieldname, cast) in _ANNOTATION_FIELDS.items():
        if key in annotations:
            overrides[fieldname] = cast(annotations[key])
    return replace(base, **overrides) if overrides else base


@dataclass(frozen=True)
class ActivatorSample:
    """Concurrency buffered at the activator for a zero-replica revision."""

    revision: str
    t: float
    buffered: int


@dataclass(frozen=True)
class ConcurrencySample:
    """Pre-aggregated concurrency from any named source."""

    source: str
    t: float
    value: float


WindowSample = Union[StatSample, ActivatorSample, ConcurrencySample]


class MetricWindow:
    """Per-source step functions of observed concurrency.

    Total concurrency at any instant is the sum over sources of the most
    recent sample.  Averages are time-weighted integrals; samples older
    than the retention span are evicted lazily on reads.
    """

    def __init__(self, retention: float):
        self.retention = retention
        self._series: dict[str, deque[tuple[float, float]]] = {}

    def record(self, sample: WindowSample) -> None:
        if isinstance(sample, StatSample):
            source, t, value = sample.replica_id, sample.t, float(sample.concurrency)
        elif isinstance(sample, ActivatorSample):
            source, t, value = "activator", sample.t, float(sample.buffered)
        else:
            source, t, value = sample.source, sample.t, sample.value
        series = self._series.setdefault(source, deque())
        if series and t < series[-1][0]:
            raise ValueError(
                f"sample for {source} at t={t} is older than last recorded {series[-1][0]}"
            )
        series.append((t, value))

    def average(self, span: float, now: float) -> float:
        """Time-weighted mean of total concurrency over [now - span, now]."""
        cutoff = now - span
        total = 0.0
        for source in list(self._series):
            series = self._series[source]
            while series and series[0][0] < now - self.retention:
                series.popleft()
            if not series:
                del self._series[source]
                continue
            total += self._source_average(series, cutoff, now)
        return total

    @staticmethod
    def _source_average(series, cutoff: float, now: float) -> float:
        points = [(t, v) for t, v in series if t >= cutoff]
        if not points or now <= points[0][0]:
            return points[-1][1] if points else 0.0
        integral = 0.0
        for i, (t, v) in enumerate(points):
            t_next = points[i + 1][0] if i + 1 < len(points) else now
            integral += v * (t_next - t)
        return integral / (now - points[0][0])


def windowed_average(window: MetricWindow, span: float, now: float) -> float:
    return window.average(span, now)


@dataclass
class ScaleState:
    revision: str
    ready_count: int = 0
    mode: str = "stable"  # "stable" | "panic"
    panic_entered_at: float | None = None
    zero_since: float | None = None


@dataclass(frozen=True)
class DesiredScale:
    count: int
    mode: str
    stable_avg: float
    panic_avg: float
    panic_entered_at: float | None


@dataclass(frozen=True)
class ScaleCommand:
    revision: str
    count: int
    t: float
    allow_zero: bool = False


def desired_replicas(
    cfg: AutoscalerConfig, state: ScaleState, window: MetricWindow, now: float
) -> DesiredScale:
    """Pure scaling decision from windowed concurrency averages.

    Panic entry: the short-window desired count reaches the panic
    threshold times current capacity.  While panicking the count never
    drops below the ready count; panic ends once the trigger has stayed
    quiet for a full stable window.
    """
    stable_avg = window.average(cfg.stable_window, now)
    panic_avg = window.average(cfg.panic_window, now)
    stable_desired = math.ceil(stable_avg / cfg.target_concurrency - _EPS)
    panic_desired = math.ceil(panic_avg / cfg.target_concurrency - _EPS)

    mode = state.mode
    panic_entered_at = state.panic_entered_at
    if panic_desired >= cfg.panic_threshold * max(state.ready_count, 1):
        mode = "panic"
        panic_entered_at = now
    elif mode == "panic" and now - (panic_entered_at or now) >= cfg.stable_window:
        mode = "stable"
        panic_entered_at = None

    if mode == "panic":
        count = max(panic_desired, state.ready_count)
    else:
        count = stable_desired

    count = max(count, cfg.min_replicas)
    if count > 0:
        up_cap = math.ceil(max(state.ready_count, 1) * cfg.max_scale_up_rate)
        count = max(1, min(count, cfg.max_replicas, up_cap))
    return DesiredScale(
        count=count, mode=mode, stable_avg=stable_avg, panic_avg=panic_avg,
        panic_entered_at=panic_entered_at,
    )


def scale_to_zero_check(
    cfg: AutoscalerConfig, state: ScaleState, buffered: int, now: float
) -> bool:
    """Authorize removing the last replica.

    Requires a full grace period of continuously-zero desired count and an
    empty activator buffer.
    """
    return (
        state.zero_since is not None
        and now - state.zero_since >= cfg.scale_to_zero_grace - _EPS
        and buffered == 0
    )


class RevisionAutoscaler:
    """Decision loop for one revision.

    Consumes concurrency samples into its window, emits ScaleCommands on a
    fixed tick, and emits an out-of-band scale-from-zero command the
    instant a request is buffered for a zero-replica revision.
    """

    def __init__(
        self,
        revision: str,
        cfg: AutoscalerConfig,
        clock: Clock,
        commands: "asyncio.Queue[ScaleCommand]",
        replica_counts: Callable[[], tuple[int, int]],  # (ready, starting)
        buffered_count: Callable[[], int],
        concurrency: Callable[[], float] | None = None,
        event_log: EventLog | None = None,
    ):
        self.revision = revision
        self.cfg = cfg
        self.clock = clock
        self.commands = commands
        self.replica_counts = replica_counts
        self.buffered_count = buffered_count
        self.concurrency = concurrency
        self.event_log = event_log
        self.window = MetricWindow(retention=cfg.stable_window)
        self.state = ScaleState(revision=revision)
        self._activation_pending = False
        self._tasks: list[asyncio.Task] = []

    def record(self, sample: WindowSample) -> None:
        self.window.record(sample)

    def poke_scale_from_zero(self) -> None:
        """Out-of-band activation signal: first buffered request at zero."""
        now = self.clock.now()
        self.window.record(
            ActivatorSample(revision=self.revision, t=now, buffered=self.buffered_count())
        )
        ready, starting = self.replica_counts()
        if ready + starting > 0 or self._activation_pending:
            return
        self._activation_pending = True
        self.state.zero_since = None
        command = ScaleCommand(revision=self.revision, count=1, t=now)
        if self.event_log is not None:
            self.event_log.emit(
                "scale_command", now, revision=self.revision, count=1,
                reason="scale_from_zero",
            )
        self.commands.put_nowait(command)

    def start(self) -> None:
        if self._tasks:
            return
        loop = asyncio.get_running_loop()
        self._tasks.append(
            loop.create_task(self.run(), name=f"autoscaler-{self.revision}")
        )
        if self.concurrency is not None:
            self._tasks.append(
                loop.create_task(self.run_sampler(), name=f"sampler-{self.revision}")
            )

    def cancel(self) -> None:
        for task in self._tasks:
            task.cancel()
        self._tasks = []

    async def stop(self) -> None:
        tasks = self._tasks
        self.cancel()
        for task in tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass

    async def run(self) -> None:
        while True:
            await self.clock.sleep(self.cfg.tick)
            self.tick()

    async def run_sampler(self) -> None:
        while True:
            await self.clock.sleep(self.cfg.sample_period)
            now = self.clock.now()
            self.window.record(
                ConcurrencySample(source="dispatched", t=now, value=self.concurrency())
            )
            self.window.record(
                ActivatorSample(revision=self.revision, t=now, buffered=self.buffered_count())
            )

    def tick(self) -> None:
        now = self.clock.now()
        ready, starting = self.replica_counts()
        if ready + starting > 0:
            self._activation_pending = False
        self.state.ready_count = ready
        decision = desired_replicas(self.cfg, self.state, self.window, now)
        self.state.mode = decision.mode
        self.state.panic_entered_at = decision.panic_entered_at

        buffered = self.buffered_count()
        desired = decision.count
        allow_zero = False
        if desired == 0:
            if self.state.zero_since is None:
                self.state.zero_since = now
            if scale_to_zero_check(self.cfg, self.state, buffered, now):
                allow_zero = True
            else:
                # Hold current capacity until the grace period authorizes zero.
                desired = max(ready + starting, 0)
        else:
            self.state.zero_since = None

        if self.event_log is not None:
            self.event_log.emit(
                "autoscaler_decision", now, revision=self.revision,
                stable_avg=round(decision.stable_avg, 6),
                panic_avg=round(decision.panic_avg, 6),
                mode=decision.mode, desired=decision.count,
            )
        current = ready + starting
        if desired != current or (allow_zero and current > 0):
            command = ScaleCommand(
                revision=self.revision, count=desired, t=now, allow_zero=allow_zero
            )
            if self.event_log is not None:
                self.event_log.emit(
                    "scale_command", now, revision=self.revision, count=desired,
                    reason="tick",
                )
            self.commands.put_nowait(command)
