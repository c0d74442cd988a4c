"""Shared builders for platform-level tests."""

from pathlib import Path

from conftest import write_linear_model, write_sleep_model


def service_doc(
    name,
    uri,
    kind="linear",
    canary_uri=None,
    canary_kind=None,
    percent=0,
    annotations=None,
    resources=None,
    canary_resources=None,
    transformer=None,
    explainer=None,
):
    def predictor(u, k, res):
        body = {"storageUri": u}
        if res:
            body["resources"] = res
        return {"predictor": {k: body}}

    spec = {"default": predictor(uri, kind, resources)}
    if canary_uri is not None:
        spec["canary"] = predictor(canary_uri, canary_kind or kind, canary_resources)
    if percent:
        spec["canaryTrafficPercent"] = percent
    if transformer:
        spec["transformer"] = transformer
    if explainer:
        spec["explainer"] = explainer
    metadata = {"name": name}
    if annotations:
        metadata["annotations"] = {k: str(v) for k, v in annotations.items()}
    return {
        "apiVersion": "miniserve/v1",
        "kind": "InferenceService",
        "metadata": metadata,
        "spec": spec,
    }


def linear_uri(tmp_path: Path, name="lin", weights=(2.0, 0.0, 1.0), bias=0.5,
               load_seconds=0.0):
    write_linear_model(tmp_path / name, weights=weights, bias=bias,
                       load_seconds=load_seconds)
    return f"file://{tmp_path}/{name}"


def sleep_uri(tmp_path: Path, name="slp", ms=100.0, load_seconds=0.0, dist="fixed",
              **params):
    write_sleep_model(tmp_path / name, ms=ms, load_seconds=load_seconds, dist=dist,
                      **params)
    return f"file://{tmp_path}/{name}"
