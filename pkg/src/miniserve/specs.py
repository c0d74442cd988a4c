"""Declarative InferenceService documents: parse, validate, hash, diff.

Documents are YAML with a flat, versioned schema (``apiVersion:
miniserve/v1``).  Field names follow the de-facto serving convention
(``storageUri``, ``canaryTrafficPercent``).  Unknown fields are hard
errors so that declarative diffs stay honest.

Everything here is pure functions over immutable values; safe to call
from any thread.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import yaml

API_VERSION = "miniserve/v1"
KIND = "InferenceService"

#: Server kinds the runtime knows how to load.  Extensible: registering a
#: new runtime (see miniserve.predictors) adds its kind here.
RUNTIME_KINDS: set[str] = {"linear", "sleep"}


class SpecError(Exception):
    """Base class for document-level failures."""


class MalformedDocument(SpecError):
    pass


class UnknownField(SpecError):
    pass


class MissingRequiredField(SpecError):
    pass


class NameMismatch(SpecError):
    pass


@dataclass(frozen=True)
class ResourceSpec:
    """Optional per-predictor runtime knobs.

    ``startup_seconds`` is the simulated artifact-transfer time charged by
    the storage initializer before the model loads; ``concurrency`` is the
    hard cap on simultaneous requests executing on one replica.
    """

    concurrency: int | None = None
    startup_seconds: float | None = None
    queue_capacity: int | None = None


@dataclass(frozen=True)
class PredictorSpec:
    runtime_kind: str
    storage_uri: str
    resources: ResourceSpec = ResourceSpec()


@dataclass(frozen=True)
class ComponentSpec:
    """A transformer or explainer reference: registry kind plus params."""

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class InferenceServiceSpec:
    name: str
    default: PredictorSpec
    canary: PredictorSpec | None = None
    canary_traffic_percent: int = 0
    transformer: ComponentSpec | None = None
    explainer: ComponentSpec | None = None
    annotations: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Revision:
    """Immutable, content-addressed snapshot of one predictor spec."""

    id: str
    parent_service: str
    role: str  # "default" | "canary"
    predictor: PredictorSpec


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class ChangeSet:
    """What changed between two versions of the same service."""

    default_changed: bool = False
    canary_added: bool = False
    canary_removed: bool = False
    canary_changed: bool = False
    percent_change: tuple[int, int] | None = None
    pipeline_changed: bool = False

    @property
    def is_noop(self) -> bool:
        return self == ChangeSet()


def _require(mapping: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise MissingRequiredField(f"{where}: missing required field '{key}'")
    return mapping[key]


def _reject_unknown(mapping: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise UnknownField(f"{where}: unknown field(s) {sorted(unknown)}")


def _parse_resources(raw: Any, where: str) -> ResourceSpec:
    if not isinstance(raw, dict):
        raise MalformedDocument(f"{where}: resources must be a mapping")
    _reject_unknown(raw, {"concurrency", "startupSeconds", "queueCapacity"}, where)
    concurrency = raw.get("concurrency")
    if concurrency is not None and (not isinstance(concurrency, int) or concurrency < 1):
        raise MalformedDocument(f"{where}: concurrency must be a positive integer")
    startup = raw.get("startupSeconds")
    if startup is not None and (not isinstance(startup, (int, float)) or startup < 0):
        raise MalformedDocument(f"{where}: startupSeconds must be a non-negative number")
    queue_capacity = raw.get("queueCapacity")
    if queue_capacity is not None and (not isinstance(queue_capacity, int) or queue_capacity < 0):
        raise MalformedDocument(f"{where}: queueCapacity must be a non-negative integer")
    return ResourceSpec(
        concurrency=concurrency,
        startup_seconds=float(startup) if startup is not None else None,
        queue_capacity=queue_capacity,
    )


def _parse_predictor(raw: Any, where: str) -> PredictorSpec:
    if not isinstance(raw, dict):
        raise MalformedDocument(f"{where}: must be a mapping")
    _reject_unknown(raw, {"predictor"}, where)
    predictor = _require(raw, "predictor", where)
    if not isinstance(predictor, dict) or len(predictor) != 1:
        raise MalformedDocument(
            f"{where}.predictor: expected exactly one runtime kind key"
        )
    ((kind, body),) = predictor.items()
    if not isinstance(body, dict):
        raise MalformedDocument(f"{where}.predictor.{kind}: must be a mapping")
    _reject_unknown(body, {"storageUri", "resources"}, f"{where}.predictor.{kind}")
    uri = _require(body, "storageUri", f"{where}.predictor.{kind}")
    if not isinstance(uri, str) or "://" not in uri:
        raise MalformedDocument(
            f"{where}.predictor.{kind}: storageUri must contain a scheme prefix"
        )
    resources = ResourceSpec()
    if "resources" in body:
        resources = _parse_resources(body["resources"], f"{where}.predictor.{kind}.resources")
    return PredictorSpec(runtime_kind=str(kind), storage_uri=uri, resources=resources)


def _parse_component(raw: Any, where: str) -> ComponentSpec:
    if not isinstance(raw, dict):
        raise MalformedDocument(f"{where}: must be a mapping")
    kind = _require(raw, "kind", where)
    params = {k: v for k, v in raw.items() if k != "kind"}
    return ComponentSpec(kind=str(kind), params=params)


def parse_spec(document_text: str) -> InferenceServiceSpec:
    """Parse one InferenceService YAML document into a validated-shape spec.

    Structural problems raise; semantic problems (out-of-range percent,
    unknown runtime kind) are left to :func:`validate` so a report can list
    them all at once.
    """
    try:
        doc = yaml.safe_load(document_text)
    except yaml.YAMLError as exc:
        raise MalformedDocument(f"invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDocument("document is not a mapping")
    return parse_spec_document(doc)


def parse_spec_document(doc: Mapping[str, Any]) -> InferenceServiceSpec:
    """Parse an already-decoded document mapping (e.g. a JSON request body)."""
    _reject_unknown(doc, {"apiVersion", "kind", "metadata", "spec"}, "document")
    api_version = _require(doc, "apiVersion", "document")
    if api_version != API_VERSION:
        raise MalformedDocument(f"unsupported apiVersion '{api_version}'")
    kind = _require(doc, "kind", "document")
    if kind != KIND:
        raise MalformedDocument(f"unsupported kind '{kind}'")

    metadata = _require(doc, "metadata", "document")
    if not isinstance(metadata, dict):
        raise MalformedDocument("metadata: must be a mapping")
    _reject_unknown(metadata, {"name", "annotations"}, "metadata")
    name = _require(metadata, "name", "metadata")
    if not isinstance(name, str) or not name:
        raise MalformedDocument("metadata.name: must be a nonempty string")
    raw_annotations = metadata.get("annotations", {})
    if not isinstance(raw_annotations, dict):
        raise MalformedDocument("metadata.annotations: must be a mapping")
    annotations = {str(k): str(v) for k, v in raw_annotations.items()}

    spec = _require(doc, "spec", "document")
    if not isinstance(spec, dict):
        raise MalformedDocument("spec: must be a mapping")
    _reject_unknown(
        spec,
        {"default", "canary", "canaryTrafficPercent", "transformer", "explainer"},
        "spec",
    )
    default = _parse_predictor(_require(spec, "default", "spec"), "spec.default")
    canary = None
    if spec.get("canary") is not None:
        canary = _parse_predictor(spec["canary"], "spec.canary")
    percent = spec.get("canaryTrafficPercent", 0)
    if not isinstance(percent, int) or isinstance(percent, bool):
        raise MalformedDocument("spec.canaryTrafficPercent: must be an integer")
    transformer = None
    if spec.get("transformer") is not None:
        transformer = _parse_component(spec["transformer"], "spec.transformer")
    explainer = None
    if spec.get("explainer") is not None:
        explainer = _parse_component(spec["explainer"], "spec.explainer")

    return InferenceServiceSpec(
        name=name,
        default=default,
        canary=canary,
        canary_traffic_percent=percent,
        transformer=transformer,
        explainer=explainer,
        annotations=annotations,
    )


def validate(spec: InferenceServiceSpec) -> ValidationReport:
    """Collect invariant violations; an empty report means deployable."""
    violations: list[str] = []
    if not spec.name:
        violations.append("name must be nonempty")
    if not 0 <= spec.canary_traffic_percent <= 100:
        violations.append(
            f"canaryTrafficPercent {spec.canary_traffic_percent} out of range 0..100"
        )
    if spec.canary_traffic_percent > 0 and spec.canary is None:
        violations.append("canaryTrafficPercent > 0 requires a canary section")
    for role, predictor in (("default", spec.default), ("canary", spec.canary)):
        if predictor is None:
            continue
        if predictor.runtime_kind not in RUNTIME_KINDS:
            violations.append(
                f"{role}: unknown runtime kind '{predictor.runtime_kind}'"
            )
    shadow = spec.annotations.get("routing.shadow", "").lower() in ("true", "1", "yes")
    if shadow and spec.canary is None:
        violations.append("routing.shadow requires a canary section to mirror to")
    if shadow and spec.canary_traffic_percent > 0:
        violations.append("routing.shadow requires canaryTrafficPercent 0")
    return ValidationReport(violations=tuple(violations))


def _predictor_document(predictor: PredictorSpec) -> dict[str, Any]:
    body: dict[str, Any] = {"storageUri": predictor.storage_uri}
    resources: dict[str, Any] = {}
    if predictor.resources.concurrency is not None:
        resources["concurrency"] = predictor.resources.concurrency
    if predictor.resources.startup_seconds is not None:
        resources["startupSeconds"] = predictor.resources.startup_seconds
    if predictor.resources.queue_capacity is not None:
        resources["queueCapacity"] = predictor.resources.queue_capacity
    if resources:
        body["resources"] = resources
    return {"predictor": {predictor.runtime_kind: body}}


def serialize(spec: InferenceServiceSpec) -> str:
    """Render a spec back to YAML; inverse of :func:`parse_spec`."""
    return yaml.safe_dump(to_document(spec), sort_keys=False)


def to_document(spec: InferenceServiceSpec) -> dict[str, Any]:
    metadata: dict[str, Any] = {"name": spec.name}
    if spec.annotations:
        metadata["annotations"] = dict(spec.annotations)
    body: dict[str, Any] = {"default": _predictor_document(spec.default)}
    if spec.canary is not None:
        body["canary"] = _predictor_document(spec.canary)
    if spec.canary_traffic_percent:
        body["canaryTrafficPercent"] = spec.canary_traffic_percent
    if spec.transformer is not None:
        body["transformer"] = {"kind": spec.transformer.kind, **spec.transformer.params}
    if spec.explainer is not None:
        body["explainer"] = {"kind": spec.explainer.kind, **spec.explainer.params}
    return {
        "apiVersion": API_VERSION,
        "kind": KIND,
        "metadata": metadata,
        "spec": body,
    }


def revision_hash(predictor: PredictorSpec) -> str:
    """Stable 64-bit content hash of a predictor spec.

    Canonical JSON of the predictor document keeps the hash invariant under
    field reordering in the source YAML.  Collision risk is accepted at
    desk scale.
    """
    canonical = json.dumps(_predictor_document(predictor), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def revision_for(spec: InferenceServiceSpec, role: str) -> Revision:
    predictor = spec.default if role == "default" else spec.canary
    if predictor is None:
        raise ValueError(f"service {spec.name} has no {role} predictor")
    return Revision(
        id=f"{spec.name}-{revision_hash(predictor)[:12]}",
        parent_service=spec.name,
        role=role,
        predictor=predictor,
    )


def diff(old: InferenceServiceSpec, new: InferenceServiceSpec) -> ChangeSet:
    """Enumerate differences between two versions of the same service."""
    if old.name != new.name:
        raise NameMismatch(f"cannot diff '{old.name}' against '{new.name}'")
    percent_change = None
    if old.canary_traffic_percent != new.canary_traffic_percent:
        percent_change = (old.canary_traffic_percent, new.canary_traffic_percent)
    pipeline_changed = (
        old.transformer != new.transformer or old.explainer != new.explainer
    )
    canary_added = old.canary is None and new.canary is not None
    canary_removed = old.canary is not None and new.canary is None
    canary_changed = (
        old.canary is not None
        and new.canary is not None
        and revision_hash(old.canary) != revision_hash(new.canary)
    )
    return ChangeSet(
        default_changed=revision_hash(old.default) != revision_hash(new.default),
        canary_added=canary_added,
        canary_removed=canary_removed,
        canary_changed=canary_changed,
        percent_change=percent_change,
        pipeline_changed=pipeline_changed,
    )


def promoted(spec: InferenceServiceSpec) -> InferenceServiceSpec:
    """Spec transform for canary promotion: canary becomes the default."""
    if spec.canary is None:
        raise NoCanary(f"service {spec.name} has no canary to promote")
    return replace(spec, default=spec.canary, canary=None, canary_traffic_percent=0)


class NoCanary(SpecError):
    pass
