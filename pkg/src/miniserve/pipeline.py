"""Per-service execution pipeline: transformer steps and the explainer.

Transformers wrap the predictor with a preprocess/postprocess pair;
explainers attach an attribution method to the same predictor.  Both run
in-process as registered components resolved by name from the service
spec.  The reference explainer is leave-one-out: the contribution of
feature i is f(x) - f(x with feature i zeroed), so explanation traffic is
d+1 predictor calls through the ordinary admission path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Awaitable, Callable, Sequence

from miniserve.specs import ComponentSpec, InferenceServiceSpec

logger = logging.getLogger(__name__)

PredictFn = Callable[[list[Any]], Awaitable[list[Any]]]


class PipelineError(Exception):
    pass


class UnknownComponent(PipelineError):
    pass


class ExplainerNotConfigured(PipelineError):
    pass


class TransformError(PipelineError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} transform failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Transformer:
    name: str
    preprocess: Callable[[list[Any]], list[Any]]
    postprocess: Callable[[list[Any]], list[Any]]


def _scale_transformer(params: dict) -> Transformer:
    factor = float(params.get("factor", 1.0))

    def preprocess(instances):
        return [[factor * float(x) for x in features] for features in instances]

    return Transformer(name=f"scale:{factor:g}", preprocess=preprocess,
                       postprocess=lambda outputs: outputs)


def _identity_transformer(params: dict) -> Transformer:
    return Transformer(name="identity", preprocess=lambda x: x,
                       postprocess=lambda x: x)


TRANSFORMERS: dict[str, Callable[[dict], Transformer]] = {
    "scale": _scale_transformer,
    "identity": _identity_transformer,
}

EXPLAINERS = {"leave_one_out"}


@dataclass(frozen=True)
class Pipeline:
    """Immutable wiring for one (service, revision) pair.

    ``predict`` is bound per dispatch (the replica is chosen per request);
    use :meth:`bound` to attach it.
    """

    service: str
    revision: str
    transformer: Transformer | None = None
    explainer: str | None = None
    predict: PredictFn | None = None

    def bound(self, predict: PredictFn) -> "Pipeline":
        return replace(self, predict=predict)


def build_pipeline(spec: InferenceServiceSpec, revision_id: str) -> Pipeline:
    """Resolve the spec's component references against the registries."""
    transformer = None
    if spec.transformer is not None:
        component = spec.transformer
        if component.kind not in TRANSFORMERS:
            raise UnknownComponent(f"transformer kind '{component.kind}' not registered")
        transformer = TRANSFORMERS[component.kind](dict(component.params))
    explainer = None
    if spec.explainer is not None:
        if spec.explainer.kind not in EXPLAINERS:
            raise UnknownComponent(f"explainer kind '{spec.explainer.kind}' not registered")
        explainer = spec.explainer.kind
    return Pipeline(
        service=spec.name, revision=revision_id,
        transformer=transformer, explainer=explainer,
    )


async def execute_predict(pipeline: Pipeline, payload: list[Any]) -> list[Any]:
    """postprocess(predict(preprocess(payload))); identity when absent."""
    if pipeline.predict is None:
        raise PipelineError("pipeline has no predictor binding")
    if pipeline.transformer is not None:
        try:
            payload = pipeline.transformer.preprocess(payload)
        except Exception as exc:
            raise TransformError("preprocess", exc) from exc
    outputs = await pipeline.predict(payload)
    if pipeline.transformer is not None:
        try:
            outputs = pipeline.transformer.postprocess(outputs)
        except Exception as exc:
            raise TransformError("postprocess", exc) from exc
    return outputs


async def execute_explain(pipeline: Pipeline, payload: list[Any]) -> list[dict[str, Any]]:
    """Leave-one-out attributions per instance.

    Calls the predict path d+1 times (one baseline, one per zeroed
    feature), so the explanation load is visible to the breaker and the
    autoscaler like any other traffic.
    """
    if pipeline.explainer is None:
        raise ExplainerNotConfigured(
            f"service {pipeline.service} has no explainer configured"
        )
    instances = [list(features) for features in payload]
    if not instances:
        return []
    width = len(instances[0])
    if any(len(features) != width for features in instances):
        raise PipelineError("explain requires uniform feature vectors")

    base = await execute_predict(pipeline, instances)
    contributions: list[list[float]] = [[] for _ in instances]
    for feature_idx in range(width):
        ablated = [
            [0.0 if j == feature_idx else x for j, x in enumerate(features)]
            for features in instances
        ]
        outputs = await execute_predict(pipeline, ablated)
        for i, output in enumerate(outputs):
            contributions[i].append(base[i] - output)
    return [
        {"prediction": base[i], "contributions": contributions[i]}
        for i in range(len(instances))
    ]
