"""Level-triggered reconciliation of declared specs onto running state.

Each service has one reconciler: a single-writer loop that owns the
service's revisions and replica sets.  Every wake (spec update, scale
command, replica lifecycle event, periodic resync) recomputes a plan from
the full observed state, so missed events are harmless and plans are
idempotent: at the fixed point the plan is empty.

Rolling updates surge one new replica at a time, shift routing weight only
onto ready replicas, and drain old replicas one per cycle, keeping serving
capacity at or above the pre-update count throughout.  While a rollout is
active the reconciler owns the two revisions' replica counts; autoscaler
commands for them are suppressed.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from miniserve.autoscaler import (
    AutoscalerConfig,
    RevisionAutoscaler,
    ScaleCommand,
    config_from_annotations,
)
from miniserve.clock import Clock
from miniserve.gateway import Gateway, RouteTarget
from miniserve.pipeline import Pipeline, build_pipeline
from miniserve.runtime import (
    ReplicaConfig,
    ReplicaHandle,
    ReplicaState,
    start_replica,
)
from miniserve.specs import InferenceServiceSpec, Revision, revision_for
from miniserve.storage import StorageInitializer
from miniserve.telemetry import EventLog, MetricsRegistry

logger = logging.getLogger(__name__)

DEFAULT_DRAIN_DEADLINE = 30.0
ROLLOUT_FAILURE_LIMIT = 3


class RevisionNotFound(Exception):
    pass


# -- actions -------------------------------------------------------------------


@dataclass(frozen=True)
class RegisterRevision:
    revision: Revision


@dataclass(frozen=True)
class CreateReplica:
    revision_id: str


@dataclass(frozen=True)
class DrainReplica:
    replica_id: str
    revision_id: str


@dataclass(frozen=True)
class StopReplica:
    replica_id: str
    revision_id: str


@dataclass(frozen=True)
class SwapRoutingTable:
    service: str
    targets: tuple[tuple[str, int], ...]
    shadow: str | None = None


@dataclass(frozen=True)
class RemoveRevision:
    revision_id: str


Action = Union[
    RegisterRevision, CreateReplica, DrainReplica, StopReplica,
    SwapRoutingTable, RemoveRevision,
]


@dataclass
class RolloutState:
    old: str
    new: str
    target: int
    failures: int = 0


@dataclass
class ObservedState:
    """Everything the reconciler knows about one service's live footprint."""

    service: str
    spec: InferenceServiceSpec | None = None
    generation: int = 0
    observed_generation: int = 0
    default_revision: str | None = None
    revisions: dict[str, Revision] = field(default_factory=dict)
    replicas: dict[str, list[ReplicaHandle]] = field(default_factory=dict)
    applied_targets: tuple[tuple[str, int], ...] | None = None
    applied_shadow: str | None = None
    rollout: RolloutState | None = None
    rollback_latched_generation: int | None = None
    quarantined_revisions: set[str] = field(default_factory=set)
    conditions: dict[str, str] = field(default_factory=dict)
    deleting: bool = False

    def ready(self, revision_id: str) -> list[ReplicaHandle]:
        return [r for r in self.replicas.get(revision_id, [])
                if r.state is ReplicaState.READY]

    def alive(self, revision_id: str) -> list[ReplicaHandle]:
        return [r for r in self.replicas.get(revision_id, [])
                if r.state in (ReplicaState.PENDING, ReplicaState.INITIALIZING,
                               ReplicaState.READY)]

    def counts(self, revision_id: str) -> tuple[int, int]:
        ready = len(self.ready(revision_id))
        starting = len([
            r for r in self.replicas.get(revision_id, [])
            if r.state in (ReplicaState.PENDING, ReplicaState.INITIALIZING)
        ])
        return ready, starting


def _shadow_enabled(spec: InferenceServiceSpec) -> bool:
    return spec.annotations.get("routing.shadow", "").lower() in ("true", "1", "yes")


def desired_targets(
    spec: InferenceServiceSpec, observed: ObservedState
) -> tuple[tuple[tuple[str, int], ...], str | None]:
    """Routing targets and shadow implied by the spec and rollout progress."""
    if observed.rollout is not None:
        rollout = observed.rollout
        new_ready = len(observed.ready(rollout.new))
        weight_new = min(100, (100 * new_ready) // rollout.target)
        return ((rollout.old, 100 - weight_new), (rollout.new, weight_new)), None
    default_id = observed.default_revision
    canary = revision_for(spec, "canary") if spec.canary is not None else None
    shadow = canary.id if (canary is not None and _shadow_enabled(spec)) else None
    percent = spec.canary_traffic_percent
    if canary is not None and percent > 0:
        return ((default_id, 100 - percent), (canary.id, percent)), shadow
    return ((default_id, 100),), shadow


def reconcile(spec: InferenceServiceSpec | None, observed: ObservedState) -> list[Action]:
    """Compute the next converging step; empty at the fixed point.

    Mutates only the controller's own bookkeeping (rollout progress,
    default-revision pointer); all world-facing changes are returned as
    actions.
    """
    plan: list[Action] = []

    if spec is None or observed.deleting:
        return _teardown_plan(observed)

    desired_default = revision_for(spec, "default")
    desired_canary = revision_for(spec, "canary") if spec.canary is not None else None

    for revision in (desired_default, desired_canary):
        if revision is not None and revision.id not in observed.revisions:
            plan.append(RegisterRevision(revision))

    if observed.default_revision is None:
        observed.default_revision = desired_default.id

    plan.extend(_plan_rollout(desired_default, observed))

    known = {desired_default.id, observed.default_revision}
    if desired_canary is not None:
        known.add(desired_canary.id)
    if observed.rollout is not None:
        known.update((observed.rollout.old, observed.rollout.new))

    targets, shadow = desired_targets(spec, observed)
    if targets != observed.applied_targets or shadow != observed.applied_shadow:
        plan.append(SwapRoutingTable(observed.service, targets, shadow))

    plan.extend(_garbage_collect(observed, keep=known))
    return plan


def _plan_rollout(desired_default: Revision, observed: ObservedState) -> list[Action]:
    plan: list[Action] = []
    rollout = observed.rollout

    if rollout is not None and rollout.new != desired_default.id:
        # Spec moved again mid-rollout; restart from the currently serving side.
        observed.rollout = rollout = None

    if rollout is None:
        if desired_default.id == observed.default_revision:
            return plan
        if observed.rollback_latched_generation == observed.generation:
            return plan  # rolled back; wait for a new spec generation
        old_id = observed.default_revision
        old_ready = len(observed.ready(old_id))
        if old_ready == 0 and not observed.alive(old_id):
            # Nothing serving: adopting the new revision is a pure swap.
            observed.default_revision = desired_default.id
            return plan
        observed.rollout = rollout = RolloutState(
            old=old_id, new=desired_default.id, target=max(1, old_ready)
        )

    new_ready = len(observed.ready(rollout.new))
    new_alive = len(observed.alive(rollout.new))
    old_alive = observed.alive(rollout.old)

    if rollout.failures >= ROLLOUT_FAILURE_LIMIT:
        # RollbackRequired: revert routing to the old revision, tear down
        # the new one, and hold until the spec changes again.
        observed.rollback_latched_generation = observed.generation
        observed.quarantined_revisions.add(rollout.new)
        observed.conditions["RollbackRequired"] = (
            f"revision {rollout.new} failed readiness {rollout.failures} times"
        )
        observed.rollout = None
        for replica in observed.replicas.get(rollout.new, []):
            if replica.state in (ReplicaState.PENDING, ReplicaState.INITIALIZING):
                plan.append(StopReplica(replica.id, rollout.new))
            elif replica.state is ReplicaState.READY:
                plan.append(DrainReplica(replica.id, rollout.new))
        return plan

    if new_alive < rollout.target:
        plan.append(CreateReplica(rollout.new))  # surge one per cycle

    keep_old = max(0, rollout.target - new_ready)
    if len(old_alive) > keep_old:
        victim = min(old_alive, key=lambda r: (r.load, r.id))
        plan.append(DrainReplica(victim.id, rollout.old))

    if new_ready >= rollout.target and not old_alive:
        observed.default_revision = rollout.new
        observed.conditions.pop("RollbackRequired", None)
        observed.rollout = None
    return plan


def _garbage_collect(observed: ObservedState, keep: set[str]) -> list[Action]:
    plan: list[Action] = []
    for revision_id in list(observed.revisions):
        if revision_id in keep:
            continue
        replicas = observed.replicas.get(revision_id, [])
        if not replicas:
            plan.append(RemoveRevision(revision_id))
            continue
        for replica in replicas:
            if replica.state in (ReplicaState.PENDING, ReplicaState.INITIALIZING):
                plan.append(StopReplica(replica.id, revision_id))
            elif replica.state is ReplicaState.READY:
                plan.append(DrainReplica(replica.id, revision_id))
    return plan


def _teardown_plan(observed: ObservedState) -> list[Action]:
    return _garbage_collect(observed, keep=set())


def rolling_update(old: str, new: str, observed: ObservedState) -> list[Action]:
    """One converging step of the old -> new replacement.

    Exposed for direct use and tests; :func:`reconcile` drives the same
    logic from the spec diff.
    """
    if observed.rollout is None or observed.rollout.new != new:
        observed.rollout = RolloutState(
            old=old, new=new, target=max(1, len(observed.ready(old)))
        )
    fake_default = observed.revisions[new]
    return _plan_rollout(fake_default, observed)


def apply_scale(cmd: ScaleCommand, observed: ObservedState) -> list[Action]:
    """Translate an autoscaler command into create/drain actions."""
    if cmd.revision not in observed.revisions:
        raise RevisionNotFound(cmd.revision)
    if observed.rollout is not None and cmd.revision in (
        observed.rollout.old, observed.rollout.new
    ):
        return []  # the rollout owns these counts
    if cmd.revision in observed.quarantined_revisions:
        return []  # rolled back; held at zero until the spec changes
    alive = observed.alive(cmd.revision)
    current = len(alive)
    if cmd.count > current:
        return [CreateReplica(cmd.revision) for _ in range(cmd.count - current)]
    if cmd.count == current:
        return []
    if cmd.count == 0 and not cmd.allow_zero:
        logger.debug("scale to zero for %s rejected: not authorized", cmd.revision)
        return []
    victims = sorted(
        alive,
        key=lambda r: (r.state is ReplicaState.READY, r.load, r.id),
    )[: current - cmd.count]
    plan: list[Action] = []
    for replica in victims:
        if replica.state is ReplicaState.READY:
            plan.append(DrainReplica(replica.id, cmd.revision))
        else:
            plan.append(StopReplica(replica.id, cmd.revision))
    return plan


class ServiceReconciler:
    """Single-writer control loop for one service."""

    def __init__(
        self,
        service: str,
        *,
        clock: Clock,
        gateway: Gateway,
        storage: StorageInitializer,
        event_log: EventLog,
        metrics: MetricsRegistry,
        model_root: Path,
        seed: int = 0,
        drain_deadline: float = DEFAULT_DRAIN_DEADLINE,
        resync_period: float = 1.0,
        autoscaler_base: AutoscalerConfig = AutoscalerConfig(),
    ):
        self.observed = ObservedState(service=service)
        self.clock = clock
        self.gateway = gateway
        self.storage = storage
        self.event_log = event_log
        self.metrics = metrics
        self.model_root = Path(model_root)
        self.seed = seed
        self.drain_deadline = drain_deadline
        self.resync_period = resync_period
        self.autoscaler_base = autoscaler_base

        self.queue: asyncio.Queue = asyncio.Queue()
        self.autoscalers: dict[str, RevisionAutoscaler] = {}
        self.pipelines: dict[str, Pipeline] = {}
        self._replica_seq = itertools.count(1)
        self._tasks: list[asyncio.Task] = []
        # dict-as-ordered-set: deterministic cancellation order at shutdown
        self._drain_tasks: dict[asyncio.Task, None] = {}
        self._closed = asyncio.Event()

    # -- public surface ------------------------------------------------------

    def submit_spec(self, spec: InferenceServiceSpec) -> int:
        self.observed.spec = spec
        self.observed.generation += 1
        self.observed.quarantined_revisions.clear()
        self.queue.put_nowait(("spec", spec))
        return self.observed.generation

    def submit_delete(self) -> None:
        self.observed.deleting = True
        self.queue.put_nowait(("delete", None))

    def wake(self) -> None:
        self.queue.put_nowait(("wake", None))

    def ready_replicas(self, revision_id: str) -> list[ReplicaHandle]:
        return self.observed.ready(revision_id)

    def pipeline_for(self, revision_id: str) -> Pipeline:
        return self.pipelines[revision_id]

    def status(self) -> dict:
        observed = self.observed
        revisions = []
        for revision_id, revision in observed.revisions.items():
            ready, starting = observed.counts(revision_id)
            role = "default" if revision_id == observed.default_revision else "canary"
            revisions.append({
                "id": revision_id,
                "role": role,
                "readyReplicas": ready,
                "startingReplicas": starting,
                "runtimeKind": revision.predictor.runtime_kind,
                "storageUri": revision.predictor.storage_uri,
            })
        traffic = {}
        if observed.applied_targets:
            for revision_id, weight in observed.applied_targets:
                traffic[revision_id] = traffic.get(revision_id, 0) + weight
        ready_condition = (
            observed.observed_generation == observed.generation
            and observed.rollout is None
            and "RollbackRequired" not in observed.conditions
        )
        return {
            "name": observed.service,
            "generation": observed.generation,
            "observedGeneration": observed.observed_generation,
            "conditions": {"Ready": ready_condition, **observed.conditions},
            "traffic": traffic,
            "shadow": observed.applied_shadow,
            "revisions": revisions,
            "rollout": (
                None if observed.rollout is None else {
                    "old": observed.rollout.old,
                    "new": observed.rollout.new,
                    "target": observed.rollout.target,
                }
            ),
        }

    # -- loop ------------------------------------------------------------------

    def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._tasks = [
            loop.create_task(self.run(), name=f"reconciler-{self.observed.service}"),
            loop.create_task(self._resync(), name=f"resync-{self.observed.service}"),
        ]

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        for scaler in self.autoscalers.values():
            await scaler.stop()
        for task in list(self._drain_tasks):
            task.cancel()
        for task in list(self._drain_tasks):
            try:
                await task
            except asyncio.CancelledError:
                pass
        for replicas in self.observed.replicas.values():
            for replica in replicas:
                if replica.startup_task is not None and not replica.startup_task.done():
                    replica.startup_task.cancel()
                    try:
                        await replica.startup_task
                    except asyncio.CancelledError:
                        pass
                if replica.batcher is not None:
                    await replica.batcher.stop()

    async def _resync(self) -> None:
        while True:
            await self.clock.sleep(self.resync_period)
            self.wake()

    async def run(self) -> None:
        while True:
            kind, item = await self.queue.get()
            self._collect_stopped()
            plan: list[Action] = []
            if kind == "scale":
                try:
                    plan.extend(apply_scale(item, self.observed))
                except RevisionNotFound:
                    pass  # stale command for a removed revision
            plan.extend(reconcile(self.observed.spec, self.observed))
            if plan:
                self._apply(plan)
            if kind == "spec":
                self.observed.observed_generation = self.observed.generation
            if self.observed.deleting and not self.observed.revisions:
                self._closed.set()
                return

    async def wait_closed(self) -> None:
        await self._closed.wait()

    def submit_scale(self, cmd: ScaleCommand) -> None:
        self.queue.put_nowait(("scale", cmd))

    # -- plan application -------------------------------------------------------

    def _apply(self, plan: list[Action]) -> None:
        for action in plan:
            if isinstance(action, RegisterRevision):
                self._register_revision(action.revision)
            elif isinstance(action, CreateReplica):
                self._create_replica(action.revision_id)
            elif isinstance(action, DrainReplica):
                self._drain_replica(action.replica_id, action.revision_id,
                                    self.drain_deadline)
            elif isinstance(action, StopReplica):
                self._drain_replica(action.replica_id, action.revision_id, 0.0)
            elif isinstance(action, SwapRoutingTable):
                self._swap_routing(action)
            elif isinstance(action, RemoveRevision):
                self._remove_revision(action.revision_id)

    def _register_revision(self, revision: Revision) -> None:
        observed = self.observed
        observed.revisions[revision.id] = revision
        observed.replicas.setdefault(revision.id, [])
        self.pipelines[revision.id] = build_pipeline(observed.spec, revision.id)
        cfg = config_from_annotations(observed.spec.annotations, self.autoscaler_base)
        scaler = RevisionAutoscaler(
            revision=revision.id,
            cfg=cfg,
            clock=self.clock,
            commands=_ScaleQueueAdapter(self),
            replica_counts=lambda rev=revision.id: self.observed.counts(rev),
            buffered_count=lambda rev=revision.id: self.gateway.buffered_count(rev),
            concurrency=lambda rev=revision.id: float(sum(
                r.outstanding for r in self.observed.replicas.get(rev, [])
                if r.state is not ReplicaState.STOPPED
            )),
            event_log=self.event_log,
        )
        self.autoscalers[revision.id] = scaler
        self.gateway.activator(revision.id)
        scaler.start()
        self.event_log.emit(
            "revision_registered", self.clock.now(), revision=revision.id,
            service=observed.service,
        )

    def _create_replica(self, revision_id: str) -> None:
        revision = self.observed.revisions[revision_id]
        spec = self.observed.spec
        config = ReplicaConfig.from_predictor(
            revision.predictor,
            spec.annotations if spec else {},
            model_root=self.model_root,
            seed=self.seed,
        )
        replica_id = f"{revision_id}-{next(self._replica_seq)}"
        replica = start_replica(
            revision, config,
            replica_id=replica_id,
            clock=self.clock,
            event_log=self.event_log,
            storage=self.storage,
            metrics=self.metrics,
            on_ready=self._on_replica_ready,
            on_stopped=self._on_replica_stopped,
        )
        self.observed.replicas[revision_id].append(replica)

    def _drain_replica(self, replica_id: str, revision_id: str, deadline: float) -> None:
        replica = next(
            (r for r in self.observed.replicas.get(revision_id, [])
             if r.id == replica_id),
            None,
        )
        if replica is None or replica.state in (ReplicaState.DRAINING, ReplicaState.STOPPED):
            return
        task = asyncio.get_running_loop().create_task(
            replica.drain(deadline), name=f"drain-{replica_id}"
        )
        self._drain_tasks[task] = None
        task.add_done_callback(lambda t: self._drain_tasks.pop(t, None))

    def _swap_routing(self, action: SwapRoutingTable) -> None:
        targets = [RouteTarget(rev, weight) for rev, weight in action.targets]
        self.gateway.table.swap(action.service, targets, action.shadow)
        self.observed.applied_targets = action.targets
        self.observed.applied_shadow = action.shadow
        self.event_log.emit(
            "routing_swap", self.clock.now(), service=action.service,
            targets=[list(t) for t in action.targets], shadow=action.shadow,
        )

    def _remove_revision(self, revision_id: str) -> None:
        scaler = self.autoscalers.pop(revision_id, None)
        if scaler is not None:
            scaler.cancel()
        self.gateway.drop_revision(revision_id)
        self.pipelines.pop(revision_id, None)
        self.observed.revisions.pop(revision_id, None)
        self.observed.replicas.pop(revision_id, None)
        self.event_log.emit(
            "revision_removed", self.clock.now(), revision=revision_id,
            service=self.observed.service,
        )

    # -- lifecycle callbacks ------------------------------------------------------

    def _on_replica_ready(self, replica: ReplicaHandle) -> None:
        if self.observed.rollout is not None and (
            replica.revision.id == self.observed.rollout.new
        ):
            self.observed.rollout.failures = 0
        self.gateway.on_replica_ready(replica)
        self.wake()

    def _on_replica_stopped(self, replica: ReplicaHandle) -> None:
        self.wake()

    def _collect_stopped(self) -> None:
        for revision_id, replicas in self.observed.replicas.items():
            stopped = [r for r in replicas if r.state is ReplicaState.STOPPED]
            for replica in stopped:
                replicas.remove(replica)
                cause = replica.stopped_cause or ""
                if (
                    self.observed.rollout is not None
                    and revision_id == self.observed.rollout.new
                    and cause.startswith("StartupFailed")
                ):
                    self.observed.rollout.failures += 1


class _ScaleQueueAdapter:
    """Routes autoscaler commands into the service reconciler queue."""

    def __init__(self, reconciler: ServiceReconciler):
        self._reconciler = reconciler

    def put_nowait(self, cmd: ScaleCommand) -> None:
        self._reconciler.submit_scale(cmd)
