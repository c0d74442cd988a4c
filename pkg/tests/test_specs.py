import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miniserve import specs
from miniserve.specs import (
    ChangeSet,
    ComponentSpec,
    InferenceServiceSpec,
    MalformedDocument,
    MissingRequiredField,
    NameMismatch,
    NoCanary,
    PredictorSpec,
    ResourceSpec,
    UnknownField,
    diff,
    parse_spec,
    promoted,
    revision_hash,
    serialize,
    validate,
)

FLOWERS = """
apiVersion: miniserve/v1
kind: InferenceService
metadata:
  name: flowers-sample
spec:
  default:
    predictor:
      linear:
        storageUri: gs://kfserving-samples/models/tensorflow/flowers
"""

FLOWERS_CANARY = """
apiVersion: miniserve/v1
kind: InferenceService
metadata:
  name: flowers-sample
spec:
  default:
    predictor:
      linear:
        storageUri: gs://kfserving-samples/models/tensorflow/flowers
  canaryTrafficPercent: 10
  canary:
    predictor:
      linear:
        storageUri: gs://kfserving-samples/models/tensorflow/flowers-2
"""


def test_parse_plain_service():
    spec = parse_spec(FLOWERS)
    assert spec.name == "flowers-sample"
    assert spec.default.runtime_kind == "linear"
    assert spec.default.storage_uri == "gs://kfserving-samples/models/tensorflow/flowers"
    assert spec.canary is None
    assert spec.canary_traffic_percent == 0


def test_parse_canary_service():
    spec = parse_spec(FLOWERS_CANARY)
    assert spec.canary is not None
    assert spec.canary.storage_uri.endswith("flowers-2")
    assert spec.canary_traffic_percent == 10


def test_parse_missing_default():
    doc = FLOWERS.replace("default:", "notdefault:")
    with pytest.raises((MissingRequiredField, UnknownField)):
        parse_spec(doc)


def test_parse_rejects_unknown_fields():
    doc = FLOWERS + "  replicasWanted: 3\n"
    with pytest.raises(UnknownField):
        parse_spec(doc)


def test_parse_rejects_uri_without_scheme():
    doc = FLOWERS.replace("gs://kfserving-samples/models/tensorflow/flowers", "/tmp/x")
    with pytest.raises(MalformedDocument):
        parse_spec(doc)


def test_parse_not_yaml():
    with pytest.raises(MalformedDocument):
        parse_spec("{unbalanced")
    with pytest.raises(MalformedDocument):
        parse_spec("- just\n- a list\n")


def test_validate_listing_values_pass():
    assert validate(parse_spec(FLOWERS)).ok
    assert validate(parse_spec(FLOWERS_CANARY)).ok


def test_validate_percent_out_of_range():
    spec = parse_spec(FLOWERS_CANARY)
    bad = specs.replace(spec, canary_traffic_percent=150)
    report = validate(bad)
    assert any("out of range" in v for v in report.violations)


def test_validate_percent_without_canary():
    spec = parse_spec(FLOWERS)
    bad = specs.replace(spec, canary_traffic_percent=10)
    report = validate(bad)
    assert any("requires a canary" in v for v in report.violations)


def test_validate_unknown_runtime_kind():
    doc = FLOWERS.replace("linear:", "tensorflow:")
    report = validate(parse_spec(doc))
    assert any("unknown runtime kind" in v for v in report.violations)


def test_revision_hash_deterministic():
    a = parse_spec(FLOWERS).default
    b = parse_spec(FLOWERS).default
    assert revision_hash(a) == revision_hash(b)


def test_revision_hash_distinguishes_uri_suffix():
    spec = parse_spec(FLOWERS_CANARY)
    assert revision_hash(spec.default) != revision_hash(spec.canary)


def test_revision_hash_survives_round_trip():
    spec = parse_spec(FLOWERS_CANARY)
    reparsed = parse_spec(serialize(spec))
    assert revision_hash(reparsed.default) == revision_hash(spec.default)
    assert revision_hash(reparsed.canary) == revision_hash(spec.canary)


def test_revision_hash_invariant_under_field_reordering():
    reordered = """
spec:
  default:
    predictor:
      linear:
        resources:
          startupSeconds: 2.0
          concurrency: 1
        storageUri: file:///tmp/m1
metadata:
  name: svc
kind: InferenceService
apiVersion: miniserve/v1
"""
    ordered = """
apiVersion: miniserve/v1
kind: InferenceService
metadata:
  name: svc
spec:
  default:
    predictor:
      linear:
        storageUri: file:///tmp/m1
        resources:
          concurrency: 1
          startupSeconds: 2.0
"""
    assert revision_hash(parse_spec(reordered).default) == revision_hash(
        parse_spec(ordered).default
    )


def test_diff_identity_is_noop():
    spec = parse_spec(FLOWERS_CANARY)
    assert diff(spec, spec).is_noop


def test_diff_canary_added():
    change = diff(parse_spec(FLOWERS), parse_spec(FLOWERS_CANARY))
    assert change.canary_added
    assert change.percent_change == (0, 10)
    assert not change.default_changed


def test_diff_default_changed():
    new = parse_spec(FLOWERS.replace("tensorflow/flowers", "tensorflow/flowers-2"))
    change = diff(parse_spec(FLOWERS), new)
    assert change.default_changed
    assert not change.canary_added


def test_diff_name_mismatch():
    other = parse_spec(FLOWERS.replace("flowers-sample", "other"))
    with pytest.raises(NameMismatch):
        diff(parse_spec(FLOWERS), other)


def test_promote_moves_canary_to_default():
    spec = parse_spec(FLOWERS_CANARY)
    promoted_spec = promoted(spec)
    assert promoted_spec.default.storage_uri.endswith("flowers-2")
    assert promoted_spec.canary is None
    assert promoted_spec.canary_traffic_percent == 0
    assert revision_hash(promoted_spec.default) == revision_hash(spec.canary)
    with pytest.raises(NoCanary):
        promoted(promoted_spec)


# -- property tests ---------------------------------------------------------

names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=20).filter(
    lambda s: not s.startswith("-")
)
uris = st.builds(lambda p: f"file:///models/{p}", names)
resources = st.builds(
    ResourceSpec,
    concurrency=st.one_of(st.none(), st.integers(min_value=1, max_value=8)),
    startup_seconds=st.one_of(st.none(), st.floats(min_value=0, max_value=60, allow_nan=False)),
    queue_capacity=st.one_of(st.none(), st.integers(min_value=0, max_value=100)),
)
predictors = st.builds(
    PredictorSpec,
    runtime_kind=st.sampled_from(["linear", "sleep"]),
    storage_uri=uris,
    resources=resources,
)
components = st.one_of(
    st.none(),
    st.builds(ComponentSpec, kind=st.just("scale"), params=st.just({"factor": 0.5})),
    st.builds(ComponentSpec, kind=st.just("leave_one_out"), params=st.just({})),
)


@st.composite
def service_specs(draw):
    canary = draw(st.one_of(st.none(), predictors))
    percent = draw(st.integers(min_value=0, max_value=100)) if canary else 0
    return InferenceServiceSpec(
        name=draw(names),
        default=draw(predictors),
        canary=canary,
        canary_traffic_percent=percent,
        transformer=draw(components),
        explainer=draw(st.one_of(st.none(), st.builds(ComponentSpec, kind=st.just("leave_one_out"), params=st.just({})))),
        annotations=draw(
            st.dictionaries(
                st.sampled_from(["autoscaling.target", "autoscaling.minReplicas", "batching.maxSize"]),
                st.sampled_from(["1", "2", "0.5", "32"]),
                max_size=2,
            )
        ),
    )


@settings(max_examples=60)
@given(service_specs())
def test_parse_serialize_round_trip(spec):
    assert parse_spec(serialize(spec)) == spec


@settings(max_examples=60)
@given(service_specs())
def test_diff_self_is_noop(spec):
    assert diff(spec, spec) == ChangeSet()
