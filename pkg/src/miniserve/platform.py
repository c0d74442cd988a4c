"""The whole platform in one process.

Owns the gateway, per-service reconcilers, storage initializer, metrics,
event log, and payload logger, all parameterized by an injected clock.
The same object backs the networked service (HTTP handlers call into it)
and the virtual-clock scenario runner (the runner calls it directly).
"""

from __future__ import annotations

import asyncio
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from miniserve.autoscaler import AutoscalerConfig, RevisionAutoscaler
from miniserve.clock import Clock
from miniserve.gateway import Gateway, GatewayResponse, UnknownService
from miniserve.pipeline import Pipeline
from miniserve.reconciler import ServiceReconciler
from miniserve.runtime import ReplicaHandle, ReplicaState
from miniserve.specs import (
    InferenceServiceSpec,
    NoCanary,
    ValidationReport,
    parse_spec_document,
    promoted,
    validate,
)
from miniserve.storage import StorageInitializer
from miniserve.telemetry import (
    EventLog,
    FilePayloadSink,
    NullPayloadSink,
    PayloadLogger,
    PayloadSink,
    platform_metrics,
)

logger = logging.getLogger(__name__)


class ValidationFailed(Exception):
    def __init__(self, report: ValidationReport):
        super().__init__("; ".join(report.violations))
        self.report = report


@dataclass
class PlatformConfig:
    model_root: Path | None = None
    seed: int = 0
    data_port: int = 8080
    control_port: int = 8081
    payload_log_path: Path | None = None
    payload_buffer: int = 1024
    activation_timeout: float = 30.0
    activator_capacity: int = 100
    drain_deadline: float = 30.0
    resync_period: float = 1.0
    bandwidth_bytes_per_sec: float = 100e6
    autoscaler: AutoscalerConfig = field(default_factory=AutoscalerConfig)

    @classmethod
    def from_yaml(cls, path: Path) -> "PlatformConfig":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        known = {
            "modelRoot": ("model_root", Path),
            "seed": ("seed", int),
            "dataPort": ("data_port", int),
            "controlPort": ("control_port", int),
            "payloadLogPath": ("payload_log_path", Path),
            "payloadBuffer": ("payload_buffer", int),
            "activationTimeoutSeconds": ("activation_timeout", float),
            "activatorCapacity": ("activator_capacity", int),
            "drainDeadlineSeconds": ("drain_deadline", float),
            "resyncPeriodSeconds": ("resync_period", float),
            "bandwidthBytesPerSec": ("bandwidth_bytes_per_sec", float),
        }
        kwargs: dict[str, Any] = {}
        for key, value in doc.items():
            if key not in known:
                raise ValueError(f"unknown platform config field '{key}'")
            fieldname, cast = known[key]
            kwargs[fieldname] = cast(value)
        return cls(**kwargs)


class Platform:
    def __init__(
        self,
        clock: Clock,
        config: PlatformConfig | None = None,
        payload_sink: PayloadSink | None = None,
    ):
        self.clock = clock
        self.config = config or PlatformConfig()
        if self.config.model_root is None:
            self.config.model_root = Path(tempfile.mkdtemp(prefix="miniserve-models-"))
        self.metrics = platform_metrics()
        self.event_log = EventLog()
        self.storage = StorageInitializer(self.config.bandwidth_bytes_per_sec)
        if payload_sink is None:
            payload_sink = (
                FilePayloadSink(self.config.payload_log_path)
                if self.config.payload_log_path is not None
                else NullPayloadSink()
            )
        self.payload_logger = PayloadLogger(
            sink=payload_sink, metrics=self.metrics, capacity=self.config.payload_buffer
        )
        self.gateway = Gateway(
            clock=self.clock,
            metrics=self.metrics,
            event_log=self.event_log,
            payload_logger=self.payload_logger,
            activation_timeout=self.config.activation_timeout,
            activator_capacity=self.config.activator_capacity,
        )
        self.services: dict[str, ServiceReconciler] = {}
        self.gateway.ready_replicas = self._ready_replicas
        self.gateway.pipeline_for = self._pipeline_for
        self.gateway.autoscaler_for = self._autoscaler_for
        self.gateway.payload_logging_enabled = self._payload_logging_enabled
        self._started = False

    # -- lifecycle -------------------------------------------------------------

    async def start(self) -> None:
        if self._started:
            return
        self.payload_logger.start()
        self._started = True

    async def stop(self) -> None:
        for service in list(self.services.values()):
            await service.stop()
        await self.payload_logger.close()
        self._started = False

    # -- control plane ------------------------------------------------------------

    def apply_document(self, document: Mapping[str, Any]) -> dict[str, Any]:
        """Parse, validate, and hand a spec document to its reconciler."""
        spec = parse_spec_document(document)
        return self.apply(spec)

    def apply(self, spec: InferenceServiceSpec) -> dict[str, Any]:
        report = validate(spec)
        if not report.ok:
            raise ValidationFailed(report)
        service = self.services.get(spec.name)
        if service is None:
            service = ServiceReconciler(
                spec.name,
                clock=self.clock,
                gateway=self.gateway,
                storage=self.storage,
                event_log=self.event_log,
                metrics=self.metrics,
                model_root=self.config.model_root / spec.name,
                seed=self.config.seed,
                drain_deadline=self.config.drain_deadline,
                resync_period=self.config.resync_period,
                autoscaler_base=self.config.autoscaler,
            )
            self.services[spec.name] = service
            service.start()
        generation = service.submit_spec(spec)
        return {"name": spec.name, "generation": generation}

    def status(self, name: str) -> dict[str, Any]:
        service = self.services.get(name)
        if service is None:
            raise UnknownService(f"no such service '{name}'")
        return service.status()

    def list_services(self) -> list[str]:
        return list(self.services)

    async def delete(self, name: str) -> None:
        service = self.services.get(name)
        if service is None:
            raise UnknownService(f"no such service '{name}'")
        service.submit_delete()
        await service.wait_closed()
        await service.stop()
        self.gateway.table.remove(name)
        del self.services[name]

    def promote(self, name: str) -> dict[str, Any]:
        """Canary promotion: spec transform + ordinary reconciliation."""
        service = self.services.get(name)
        if service is None:
            raise UnknownService(f"no such service '{name}'")
        spec = service.observed.spec
        if spec is None or spec.canary is None:
            raise NoCanary(f"service {name} has no canary to promote")
        return self.apply(promoted(spec))

    # -- data plane ----------------------------------------------------------------

    async def predict(self, service: str, payload: Any) -> GatewayResponse:
        return await self.gateway.predict(service, payload, kind="predict")

    async def explain(self, service: str, payload: Any) -> GatewayResponse:
        return await self.gateway.predict(service, payload, kind="explain")

    # -- observability ----------------------------------------------------------------

    def render_metrics(self) -> str:
        ready = in_flight = buffered = 0
        for service in self.services.values():
            for revision_id in service.observed.revisions:
                r, _ = service.observed.counts(revision_id)
                ready += r
                in_flight += sum(
                    rep.outstanding
                    for rep in service.observed.replicas.get(revision_id, [])
                    if rep.state is not ReplicaState.STOPPED
                )
                buffered += self.gateway.buffered_count(revision_id)
        self.metrics.set_gauge("ready_replicas", ready)
        self.metrics.set_gauge("in_flight", in_flight)
        self.metrics.set_gauge("buffered", buffered)
        return self.metrics.render()

    async def wait_settled(self, timeout: float = 60.0, poll: float = 0.1) -> bool:
        """Wait until applied specs are observed and minimum replicas are Ready."""
        deadline = self.clock.now() + timeout
        while self.clock.now() < deadline:
            if self._settled():
                return True
            await self.clock.sleep(poll)
        return self._settled()

    def _settled(self) -> bool:
        for service in self.services.values():
            observed = service.observed
            if observed.observed_generation != observed.generation:
                return False
            if observed.rollout is not None:
                return False
            for revision_id, scaler in service.autoscalers.items():
                ready, starting = observed.counts(revision_id)
                if ready < scaler.cfg.min_replicas:
                    return False
                if starting > 0:
                    return False
        return True

    # -- gateway wiring ----------------------------------------------------------------

    def _find_service_for_revision(self, revision_id: str) -> ServiceReconciler | None:
        for service in self.services.values():
            if revision_id in service.observed.revisions:
                return service
        return None

    def _ready_replicas(self, revision_id: str) -> list[ReplicaHandle]:
        service = self._find_service_for_revision(revision_id)
        return service.ready_replicas(revision_id) if service else []

    def _pipeline_for(self, service_name: str, revision_id: str) -> Pipeline:
        return self.services[service_name].pipeline_for(revision_id)

    def _autoscaler_for(self, revision_id: str) -> RevisionAutoscaler | None:
        service = self._find_service_for_revision(revision_id)
        return service.autoscalers.get(revision_id) if service else None

    def _payload_logging_enabled(self, service_name: str) -> bool:
        service = self.services.get(service_name)
        if service is None or service.observed.spec is None:
            return False
        flag = service.observed.spec.annotations.get("payloadLog.enabled", "")
        return flag.lower() in ("true", "1", "yes")
