"""Single ingress for inference traffic.

Routing splits traffic between the default and canary revision with a
deterministic smooth-weighted-round-robin, so a configured percentage is
exact over any window of 100 consecutive requests.  A shadow revision,
when configured, receives a fire-and-forget duplicate of every request;
the client only ever sees the primary's response.

The activator is folded in: requests for a revision with zero ready
replicas are buffered FIFO, the autoscaler is poked immediately, and the
queue drains in order as soon as the first replica turns ready.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from miniserve.autoscaler import RevisionAutoscaler
from miniserve.clock import Clock
from miniserve.pipeline import Pipeline, execute_explain, execute_predict
from miniserve.runtime import NotReady, Overloaded, ReplicaHandle
from miniserve.telemetry import EventLog, MetricsRegistry, PayloadLogger, PayloadRecord

logger = logging.getLogger(__name__)

DEFAULT_ACTIVATION_TIMEOUT = 30.0
DEFAULT_ACTIVATOR_CAPACITY = 100


class GatewayError(Exception):
    status = 500


class UnknownService(GatewayError):
    status = 404


class BufferFull(GatewayError):
    status = 429


class ActivationTimeout(GatewayError):
    status = 503


@dataclass
class RequestEnvelope:
    id: str
    service: str
    arrival: float
    payload: Any
    routed_revision: str | None = None
    deadline: float | None = None
    shadow: bool = False
    cold_started: bool = False


@dataclass
class RouteTarget:
    revision: str
    weight: int


class ServiceRoute:
    """SWRR state over weighted revision targets, plus an optional shadow."""

    def __init__(self, targets: list[RouteTarget], shadow: str | None = None):
        if sum(t.weight for t in targets) != 100:
            raise ValueError("route weights must sum to 100")
        self.targets = targets
        self.shadow = shadow
        self._current = [0] * len(targets)

    def pick(self) -> str:
        total = sum(t.weight for t in self.targets)
        best = -1
        for i, target in enumerate(self.targets):
            if target.weight == 0:
                continue
            self._current[i] += target.weight
            if best < 0 or self._current[i] > self._current[best]:
                best = i
        self._current[best] -= total
        return self.targets[best].revision

    def describe(self) -> dict[str, Any]:
        return {
            "targets": [
                {"revision": t.revision, "weight": t.weight} for t in self.targets
            ],
            "shadow": self.shadow,
        }


class RoutingTable:
    """Service name -> route; whole-route swaps are atomic."""

    def __init__(self):
        self._routes: dict[str, ServiceRoute] = {}

    def swap(self, service: str, targets: list[RouteTarget], shadow: str | None = None) -> None:
        self._routes[service] = ServiceRoute(targets, shadow)

    def remove(self, service: str) -> None:
        self._routes.pop(service, None)

    def get(self, service: str) -> ServiceRoute:
        route = self._routes.get(service)
        if route is None:
            raise UnknownService(f"no such service '{service}'")
        return route

    def has(self, service: str) -> bool:
        return service in self._routes


def route(env: RequestEnvelope, table: RoutingTable) -> str:
    """Assign a revision to the envelope via the service's SWRR."""
    env.routed_revision = table.get(env.service).pick()
    return env.routed_revision


@dataclass
class _BufferedRequest:
    env: RequestEnvelope
    future: asyncio.Future  # resolves to a ReplicaHandle
    enqueued_at: float


class ActivatorQueue:
    """FIFO buffer for one revision while it has zero ready replicas."""

    def __init__(self, revision: str, capacity: int = DEFAULT_ACTIVATOR_CAPACITY,
                 timeout: float = DEFAULT_ACTIVATION_TIMEOUT):
        self.revision = revision
        self.capacity = capacity
        self.timeout = timeout
        self._waiting: deque[_BufferedRequest] = deque()

    def __len__(self) -> int:
        return len(self._waiting)

    def buffer(self, env: RequestEnvelope, now: float) -> asyncio.Future:
        if len(self._waiting) >= self.capacity:
            raise BufferFull(f"activator buffer full for {self.revision}")
        item = _BufferedRequest(
            env=env, future=asyncio.get_running_loop().create_future(), enqueued_at=now
        )
        self._waiting.append(item)
        return item.future

    def release_all(self, pick: Callable[[], ReplicaHandle | None]) -> int:
        """Forward every buffered request, FIFO, to picked replicas."""
        released = 0
        while self._waiting:
            replica = pick()
            if replica is None:
                break
            item = self._waiting.popleft()
            if item.future.done():
                continue  # timed out concurrently; already rejected
            item.future.set_result(replica)
            released += 1
        return released

    def discard(self, future: asyncio.Future) -> None:
        self._waiting = deque(item for item in self._waiting if item.future is not future)

    def oldest_wait(self, now: float) -> float:
        return now - self._waiting[0].enqueued_at if self._waiting else 0.0


def pick_replica(candidates: list[ReplicaHandle], rr: itertools.count) -> ReplicaHandle:
    """Least loaded (admitted-but-unfinished) replica; round-robin on ties."""
    if not candidates:
        raise ValueError("pick_replica needs a nonempty candidate list")
    low = min(r.load for r in candidates)
    tied = [r for r in candidates if r.load == low]
    return tied[next(rr) % len(tied)]


@dataclass
class GatewayResponse:
    request_id: str
    service: str
    revision: str | None
    status: int
    outputs: Any = None
    error: str | None = None
    latency: float = 0.0
    batch_size: int = 1
    cold_start: bool = False


class Gateway:
    """Route -> (shadow) -> admit-or-buffer -> pipeline -> replica."""

    def __init__(
        self,
        clock: Clock,
        metrics: MetricsRegistry,
        event_log: EventLog,
        payload_logger: PayloadLogger | None = None,
        activation_timeout: float = DEFAULT_ACTIVATION_TIMEOUT,
        activator_capacity: int = DEFAULT_ACTIVATOR_CAPACITY,
    ):
        self.clock = clock
        self.metrics = metrics
        self.event_log = event_log
        self.payload_logger = payload_logger
        self.activation_timeout = activation_timeout
        self.activator_capacity = activator_capacity
        self.table = RoutingTable()
        self.activators: dict[str, ActivatorQueue] = {}
        self._rr: dict[str, itertools.count] = {}
        self._request_seq = itertools.count(1)
        # wired by the platform per revision
        self.ready_replicas: Callable[[str], list[ReplicaHandle]] = lambda rev: []
        self.pipeline_for: Callable[[str, str], Pipeline] = None
        self.autoscaler_for: Callable[[str], RevisionAutoscaler | None] = lambda rev: None
        self.payload_logging_enabled: Callable[[str], bool] = lambda service: False
        # dict-as-ordered-set: deterministic cancellation order at shutdown
        self._shadow_tasks: dict[asyncio.Task, None] = {}

    # -- wiring -----------------------------------------------------------

    def activator(self, revision: str) -> ActivatorQueue:
        if revision not in self.activators:
            self.activators[revision] = ActivatorQueue(
                revision, capacity=self.activator_capacity,
                timeout=self.activation_timeout,
            )
        return self.activators[revision]

    def drop_revision(self, revision: str) -> None:
        self.activators.pop(revision, None)

    def buffered_count(self, revision: str) -> int:
        queue = self.activators.get(revision)
        return len(queue) if queue else 0

    def on_replica_ready(self, replica: ReplicaHandle) -> None:
        """Reconciler lifecycle hook: drain the activator FIFO."""
        revision = replica.revision.id
        queue = self.activators.get(revision)
        if not queue or not len(queue):
            return
        first_wait = queue.oldest_wait(self.clock.now())
        released = queue.release_all(lambda: self._pick_ready(revision))
        if released:
            self.metrics.inc("cold_starts_total")
            self.event_log.emit(
                "cold_start", self.clock.now(), revision=revision,
                released=released, waited=round(first_wait, 9),
            )

    def _pick_ready(self, revision: str) -> ReplicaHandle | None:
        candidates = self.ready_replicas(revision)
        if not candidates:
            return None
        rr = self._rr.setdefault(revision, itertools.count())
        return pick_replica(candidates, rr)

    # -- data path -----------------------------------------------------------

    async def predict(self, service: str, payload: Any, kind: str = "predict") -> GatewayResponse:
        arrival = self.clock.now()
        env = RequestEnvelope(
            id=f"{service}-{next(self._request_seq)}",
            service=service, arrival=arrival, payload=payload,
        )
        self.metrics.inc("requests_total")
        try:
            revision = route(env, self.table)
        except UnknownService as exc:
            self.metrics.inc("errors_total")
            return GatewayResponse(
                request_id=env.id, service=service, revision=None,
                status=exc.status, error=str(exc), latency=0.0,
            )
        shadow_revision = self.table.get(service).shadow
        if shadow_revision is not None:
            self.mirror_shadow(env, shadow_revision, kind)
        response = await self._dispatch(env, revision, kind)
        if response.error is not None:
            self.metrics.inc("errors_total")
        self.metrics.observe("request_latency_seconds", response.latency)
        self._log_payload(env, response)
        return response

    def mirror_shadow(self, env: RequestEnvelope, shadow_revision: str, kind: str) -> None:
        """Fire-and-forget duplicate; failures count in metrics only."""
        copy = RequestEnvelope(
            id=f"{env.id}:shadow", service=env.service, arrival=env.arrival,
            payload=env.payload, shadow=True,
        )
        self.metrics.inc("shadow_total")

        async def run_shadow():
            response = await self._dispatch(copy, shadow_revision, kind)
            if response.error is not None:
                self.metrics.inc("shadow_errors_total")

        task = asyncio.get_running_loop().create_task(
            run_shadow(), name=f"shadow-{copy.id}"
        )
        self._shadow_tasks[task] = None
        task.add_done_callback(lambda t: self._shadow_tasks.pop(t, None))

    async def _dispatch(self, env: RequestEnvelope, revision: str, kind: str) -> GatewayResponse:
        try:
            outputs = await self._execute(env, revision, kind)
            latency = self.clock.now() - env.arrival
            return GatewayResponse(
                request_id=env.id, service=env.service, revision=revision,
                status=200, outputs=outputs, latency=latency,
                cold_start=env.cold_started,
            )
        except (BufferFull, ActivationTimeout) as exc:
            return self._error_response(env, revision, exc.status, exc)
        except Overloaded as exc:
            return self._error_response(env, revision, 429, exc)
        except NotReady as exc:
            return self._error_response(env, revision, 503, exc)
        except Exception as exc:
            return self._error_response(env, revision, 500, exc)

    async def _execute(self, env: RequestEnvelope, revision: str, kind: str):
        pipeline = self.pipeline_for(env.service, revision)
        last_exc: NotReady | None = None
        for _ in range(3):
            replica = await self._admit_or_buffer(env, revision)
            bound = pipeline.bound(
                lambda payload: self._replica_call(replica, env.id, payload)
            )
            try:
                if kind == "explain":
                    return await execute_explain(bound, env.payload)
                return await execute_predict(bound, env.payload)
            except NotReady as exc:
                # picked replica started draining in the same instant; re-admit
                last_exc = exc
        raise last_exc

    async def _replica_call(self, replica: ReplicaHandle, request_id: str, payload):
        response = await replica.handle_request(request_id, payload)
        return response.output

    def _error_response(self, env, revision, status, exc) -> GatewayResponse:
        return GatewayResponse(
            request_id=env.id, service=env.service, revision=revision,
            status=status, error=f"{type(exc).__name__}: {exc}",
            latency=self.clock.now() - env.arrival,
        )

    async def _admit_or_buffer(self, env: RequestEnvelope, revision: str) -> ReplicaHandle:
        replica = self._pick_ready(revision)
        if replica is not None:
            return replica
        queue = self.activator(revision)
        now = self.clock.now()
        future = queue.buffer(env, now)  # raises BufferFull
        self.event_log.emit(
            "request_buffered", now, request=env.id, revision=revision,
            buffered=len(queue),
        )
        scaler = self.autoscaler_for(revision)
        if scaler is not None and not env.shadow:
            scaler.poke_scale_from_zero()
        try:
            replica = await asyncio.wait_for(future, timeout=queue.timeout)
        except asyncio.TimeoutError:
            queue.discard(future)
            self.event_log.emit(
                "request_activation_timeout", self.clock.now(), request=env.id,
                revision=revision,
            )
            raise ActivationTimeout(
                f"no replica became ready within {queue.timeout:g}s"
            ) from None
        env.cold_started = True
        self.event_log.emit(
            "request_released", self.clock.now(), request=env.id,
            revision=revision, replica=replica.id,
        )
        return replica

    def _log_payload(self, env: RequestEnvelope, response: GatewayResponse) -> None:
        if self.payload_logger is None or not self.payload_logging_enabled(env.service):
            return
        self.payload_logger.log(
            PayloadRecord(
                request_id=env.id, service=env.service,
                revision=response.revision or "", timestamp=env.arrival,
                request=env.payload, response=response.outputs,
                error=response.error, latency=response.latency,
            )
        )
