"""Model-server runtimes a replica can load.

Two concrete kinds stand in for the zoo of real serving frameworks:

* ``linear`` -- a deterministic dot-product model read from ``model.json``;
  useful wherever outputs must be checkable by hand.
* ``sleep``  -- a timed no-op server read from ``server.json`` whose service
  time follows a configured distribution; useful for load and autoscaling
  scenarios.  Draws are reproducible under a fixed seed.

The registry maps a runtime kind to its loader, so new kinds can be added
without touching the replica lifecycle.
"""

from __future__ import annotations

import json
import math
import random
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

from miniserve import specs
from miniserve.clock import Clock


class PredictorError(Exception):
    """Raised for malformed model artifacts or bad inference inputs."""


class Predictor(Protocol):
    kind: str
    load_seconds: float

    async def predict(
        self, requests: Sequence[Sequence[Any]], clock: Clock
    ) -> list[list[Any]]:
        """Run one forward pass over a batch of requests.

        ``requests`` holds one instances-list per request; the result is
        aligned per request, one output per instance.
        """
        ...


class LinearPredictor:
    kind = "linear"

    def __init__(self, weights: list[float], bias: float, load_seconds: float = 0.0):
        self.weights = weights
        self.bias = bias
        self.load_seconds = load_seconds

    async def predict(self, requests, clock):
        outputs = []
        for instances in requests:
            outputs.append([self._predict_one(x) for x in instances])
        return outputs

    def _predict_one(self, features) -> float:
        if not isinstance(features, (list, tuple)) or len(features) != len(self.weights):
            raise PredictorError(
                f"expected a feature vector of length {len(self.weights)}, "
                f"got {features!r}"
            )
        try:
            return sum(w * float(x) for w, x in zip(self.weights, features)) + self.bias
        except (TypeError, ValueError) as exc:
            raise PredictorError(f"non-numeric feature in {features!r}") from exc


class SleepPredictor:
    kind = "sleep"

    def __init__(self, dist: str, params: dict[str, float], rng: random.Random,
                 load_seconds: float = 0.0):
        self.dist = dist
        self.params = params
        self.rng = rng
        self.load_seconds = load_seconds

    def sample_ms(self) -> float:
        if self.dist == "fixed":
            return self.params["ms"]
        if self.dist == "exp":
            return self.rng.expovariate(1.0 / self.params["mean_ms"])
        if self.dist == "lognormal":
            return self.params["median_ms"] * math.exp(
                self.params["sigma"] * self.rng.gauss(0.0, 1.0)
            )
        raise PredictorError(f"unknown service time distribution '{self.dist}'")

    async def predict(self, requests, clock):
        # One timed forward pass covers the whole batch.
        ms = self.sample_ms()
        await clock.sleep(ms / 1000.0)
        return [[round(ms, 6) for _ in instances] for instances in requests]


def _load_json(path: Path) -> dict:
    if not path.is_file():
        raise PredictorError(f"missing model artifact {path.name} in {path.parent}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PredictorError(f"{path.name} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise PredictorError(f"{path.name} must hold a JSON object")
    return doc


def _load_linear(model_dir: Path, rng: random.Random) -> LinearPredictor:
    doc = _load_json(model_dir / "model.json")
    try:
        weights = [float(w) for w in doc["weights"]]
        bias = float(doc.get("bias", 0.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise PredictorError(f"model.json malformed: {exc}") from exc
    return LinearPredictor(weights, bias, load_seconds=float(doc.get("load_seconds", 0.0)))


_SLEEP_REQUIRED_PARAMS = {
    "fixed": ("ms",),
    "exp": ("mean_ms",),
    "lognormal": ("median_ms", "sigma"),
}


def _load_sleep(model_dir: Path, rng: random.Random) -> SleepPredictor:
    doc = _load_json(model_dir / "server.json")
    service = doc.get("service_time_ms")
    if not isinstance(service, dict) or "dist" not in service:
        raise PredictorError("server.json needs service_time_ms: {dist, ...}")
    dist = service["dist"]
    if dist not in _SLEEP_REQUIRED_PARAMS:
        raise PredictorError(f"unknown service time distribution '{dist}'")
    params = {}
    for key in _SLEEP_REQUIRED_PARAMS[dist]:
        if key not in service:
            raise PredictorError(f"service_time_ms.{dist} needs parameter '{key}'")
        params[key] = float(service[key])
    return SleepPredictor(dist, params, rng,
                          load_seconds=float(doc.get("load_seconds", 0.0)))


Loader = Callable[[Path, random.Random], Predictor]

_LOADERS: dict[str, Loader] = {
    "linear": _load_linear,
    "sleep": _load_sleep,
}


def register_runtime(kind: str, loader: Loader) -> None:
    _LOADERS[kind] = loader
    specs.RUNTIME_KINDS.add(kind)


def load_predictor(kind: str, model_dir: Path, rng: random.Random) -> Predictor:
    if kind not in _LOADERS:
        raise PredictorError(f"no registered runtime for kind '{kind}'")
    return _LOADERS[kind](Path(model_dir), rng)
