import json
from pathlib import Path

from miniserve.specs import PredictorSpec, ResourceSpec, Revision, revision_hash


def write_linear_model(dirpath: Path, weights=(2.0, 0.0, 1.0), bias=0.5, load_seconds=0.0):
    dirpath.mkdir(parents=True, exist_ok=True)
    (dirpath / "model.json").write_text(
        json.dumps({"weights": list(weights), "bias": bias, "load_seconds": load_seconds})
    )
    return dirpath


def write_sleep_model(dirpath: Path, ms=100.0, load_seconds=0.0, dist="fixed", **params):
    dirpath.mkdir(parents=True, exist_ok=True)
    service_time = {"dist": dist, **({"ms": ms} if dist == "fixed" else params)}
    (dirpath / "server.json").write_text(
        json.dumps({"service_time_ms": service_time, "load_seconds": load_seconds})
    )
    return dirpath


def make_revision(uri: str, kind: str, service="svc", role="default",
                  resources: ResourceSpec = ResourceSpec()) -> Revision:
    predictor = PredictorSpec(runtime_kind=kind, storage_uri=uri, resources=resources)
    return Revision(
        id=f"{service}-{revision_hash(predictor)[:12]}",
        parent_service=service,
        role=role,
        predictor=predictor,
    )
