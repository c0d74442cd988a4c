import asyncio
from dataclasses import dataclass

import pytest
from helpers import linear_uri, service_doc, sleep_uri

from miniserve.autoscaler import ScaleCommand
from miniserve.clock import LoopClock, run_simulation
from miniserve.platform import Platform, PlatformConfig
from miniserve.reconciler import (
    CreateReplica,
    DrainReplica,
    ObservedState,
    RegisterRevision,
    RemoveRevision,
    RevisionNotFound,
    StopReplica,
    SwapRoutingTable,
    apply_scale,
    reconcile,
)
from miniserve.runtime import ReplicaState
from miniserve.specs import NoCanary, parse_spec_document, revision_for, revision_hash


@dataclass
class FakeReplica:
    id: str
    state: ReplicaState = ReplicaState.READY
    load: int = 0


def _observed_converged(spec, replicas_per_rev=1):
    """Hand-built fixed point for a canary-less spec."""
    default = revision_for(spec, "default")
    observed = ObservedState(service=spec.name, spec=spec, generation=1,
                             observed_generation=1)
    observed.revisions[default.id] = default
    observed.replicas[default.id] = [
        FakeReplica(id=f"{default.id}-{i}") for i in range(replicas_per_rev)
    ]
    observed.default_revision = default.id
    observed.applied_targets = ((default.id, 100),)
    observed.applied_shadow = None
    return observed, default


def _spec(tmp_path, **kwargs):
    return parse_spec_document(service_doc("svc", linear_uri(tmp_path), **kwargs))


def test_reconcile_fixed_point_is_empty_plan(tmp_path):
    spec = _spec(tmp_path)
    observed, _ = _observed_converged(spec)
    assert reconcile(spec, observed) == []


def test_reconcile_first_apply_registers_and_routes(tmp_path):
    spec = _spec(tmp_path)
    observed = ObservedState(service="svc", spec=spec, generation=1)
    plan = reconcile(spec, observed)
    default = revision_for(spec, "default")
    assert RegisterRevision(default) in plan
    swap = next(a for a in plan if isinstance(a, SwapRoutingTable))
    assert swap.targets == ((default.id, 100),)


def test_reconcile_canary_added(tmp_path):
    base = _spec(tmp_path)
    observed, default = _observed_converged(base)
    with_canary = parse_spec_document(
        service_doc(
            "svc", linear_uri(tmp_path),
            canary_uri=linear_uri(tmp_path, name="lin2", weights=(1.0, 1.0, 1.0)),
            percent=10,
        )
    )
    plan = reconcile(with_canary, observed)
    canary = revision_for(with_canary, "canary")
    assert RegisterRevision(canary) in plan
    swap = next(a for a in plan if isinstance(a, SwapRoutingTable))
    assert swap.targets == ((default.id, 90), (canary.id, 10))


def test_reconcile_canary_removed(tmp_path):
    with_canary = parse_spec_document(
        service_doc(
            "svc", linear_uri(tmp_path),
            canary_uri=linear_uri(tmp_path, name="lin2", weights=(1.0, 1.0, 1.0)),
            percent=10,
        )
    )
    observed, default = _observed_converged(with_canary)
    canary = revision_for(with_canary, "canary")
    observed.revisions[canary.id] = canary
    observed.replicas[canary.id] = [FakeReplica(id=f"{canary.id}-1")]
    observed.applied_targets = ((default.id, 90), (canary.id, 10))

    without = _spec(tmp_path)
    plan = reconcile(without, observed)
    swap = next(a for a in plan if isinstance(a, SwapRoutingTable))
    assert swap.targets == ((default.id, 100),)
    assert DrainReplica(f"{canary.id}-1", canary.id) in plan

    # once the canary replica is gone, the revision itself is removed
    observed.applied_targets = swap.targets
    observed.replicas[canary.id] = []
    plan2 = reconcile(without, observed)
    assert RemoveRevision(canary.id) in plan2


def test_rollout_surges_then_drains_preserving_capacity(tmp_path):
    old_spec = _spec(tmp_path)
    observed, old = _observed_converged(old_spec, replicas_per_rev=2)
    new_spec = parse_spec_document(
        service_doc("svc", linear_uri(tmp_path, name="lin-v2", weights=(3.0, 0.0, 1.0)))
    )
    new = revision_for(new_spec, "default")

    serving_capacity = []

    def capacity():
        return len(observed.ready(old.id)) + len(observed.ready(new.id))

    # cycle 1: register + surge one new replica, no drain yet (new not ready)
    plan = reconcile(new_spec, observed)
    assert RegisterRevision(new) in plan
    assert plan.count(CreateReplica(new.id)) == 1
    assert not any(isinstance(a, DrainReplica) for a in plan)
    observed.revisions[new.id] = new
    observed.replicas[new.id] = [FakeReplica(id=f"{new.id}-1", state=ReplicaState.INITIALIZING)]
    serving_capacity.append(capacity())

    # cycle 2: still starting; no second surge, still no drain
    plan = reconcile(new_spec, observed)
    assert CreateReplica(new.id) not in plan
    assert not any(isinstance(a, DrainReplica) for a in plan)

    # cycle 3: first new replica ready -> drain one old, shift weight
    observed.replicas[new.id][0].state = ReplicaState.READY
    serving_capacity.append(capacity())
    plan = reconcile(new_spec, observed)
    drains = [a for a in plan if isinstance(a, DrainReplica)]
    assert len(drains) == 1
    swap = next(a for a in plan if isinstance(a, SwapRoutingTable))
    assert dict(swap.targets)[new.id] == 50
    observed.replicas[old.id] = [
        r for r in observed.replicas[old.id] if r.id != drains[0].replica_id
    ]
    observed.applied_targets = swap.targets
    serving_capacity.append(capacity())

    # cycle 4: surge second new replica
    plan = reconcile(new_spec, observed)
    assert plan.count(CreateReplica(new.id)) == 1
    observed.replicas[new.id].append(FakeReplica(id=f"{new.id}-2"))
    serving_capacity.append(capacity())

    # cycle 5: both new ready -> drain the last old
    plan = reconcile(new_spec, observed)
    drains = [a for a in plan if isinstance(a, DrainReplica)]
    assert len(drains) == 1
    observed.replicas[old.id] = []
    serving_capacity.append(capacity())

    # cycle 6: completion; default flips, old revision garbage-collected
    plan = reconcile(new_spec, observed)
    assert observed.default_revision == new.id
    assert observed.rollout is None
    assert RemoveRevision(old.id) in plan
    assert min(serving_capacity) >= 2  # never below the pre-update ready count


def test_rollout_from_zero_is_pure_swap(tmp_path):
    old_spec = _spec(tmp_path)
    observed, old = _observed_converged(old_spec, replicas_per_rev=0)
    new_spec = parse_spec_document(
        service_doc("svc", linear_uri(tmp_path, name="lin-v2", weights=(9.0,)))
    )
    new = revision_for(new_spec, "default")
    plan = reconcile(new_spec, observed)
    assert observed.default_revision == new.id
    assert observed.rollout is None
    assert not any(isinstance(a, (CreateReplica, DrainReplica)) for a in plan)
    swap = next(a for a in plan if isinstance(a, SwapRoutingTable))
    assert swap.targets == ((new.id, 100),)


def test_rollout_rollback_after_repeated_startup_failures(tmp_path):
    old_spec = _spec(tmp_path)
    observed, old = _observed_converged(old_spec, replicas_per_rev=2)
    new_spec = parse_spec_document(
        service_doc("svc", linear_uri(tmp_path, name="lin-v2", weights=(7.0,)))
    )
    new = revision_for(new_spec, "default")
    plan = reconcile(new_spec, observed)
    observed.revisions[new.id] = new
    observed.replicas[new.id] = []

    observed.rollout.failures = 3
    plan = reconcile(new_spec, observed)
    assert observed.rollout is None
    assert "RollbackRequired" in observed.conditions
    assert observed.default_revision == old.id
    swap = next(a for a in plan if isinstance(a, SwapRoutingTable))
    assert swap.targets == ((old.id, 100),)
    # latched: replanning under the same generation does not restart the rollout
    plan2 = reconcile(new_spec, observed)
    assert observed.rollout is None
    assert not any(isinstance(a, CreateReplica) for a in plan2)


def test_apply_scale_up(tmp_path):
    spec = _spec(tmp_path)
    observed, default = _observed_converged(spec, replicas_per_rev=2)
    plan = apply_scale(ScaleCommand(revision=default.id, count=5, t=0.0), observed)
    assert plan == [CreateReplica(default.id)] * 3


def test_apply_scale_down_picks_least_loaded(tmp_path):
    spec = _spec(tmp_path)
    observed, default = _observed_converged(spec, replicas_per_rev=0)
    observed.replicas[default.id] = [
        FakeReplica(id="a", load=5),
        FakeReplica(id="b", load=1),
        FakeReplica(id="c", load=3),
    ]
    plan = apply_scale(ScaleCommand(revision=default.id, count=1, t=0.0), observed)
    assert plan == [
        DrainReplica("b", default.id),
        DrainReplica("c", default.id),
    ]


def test_apply_scale_to_zero_requires_authorization(tmp_path):
    spec = _spec(tmp_path)
    observed, default = _observed_converged(spec, replicas_per_rev=1)
    unauthorized = ScaleCommand(revision=default.id, count=0, t=0.0)
    assert apply_scale(unauthorized, observed) == []
    authorized = ScaleCommand(revision=default.id, count=0, t=0.0, allow_zero=True)
    plan = apply_scale(authorized, observed)
    assert len(plan) == 1 and isinstance(plan[0], DrainReplica)


def test_apply_scale_unknown_revision(tmp_path):
    spec = _spec(tmp_path)
    observed, _ = _observed_converged(spec)
    with pytest.raises(RevisionNotFound):
        apply_scale(ScaleCommand(revision="ghost", count=1, t=0.0), observed)


def test_apply_scale_suppressed_during_rollout(tmp_path):
    old_spec = _spec(tmp_path)
    observed, old = _observed_converged(old_spec, replicas_per_rev=2)
    new_spec = parse_spec_document(
        service_doc("svc", linear_uri(tmp_path, name="lin-v2", weights=(7.0,)))
    )
    reconcile(new_spec, observed)  # starts the rollout
    assert observed.rollout is not None
    cmd = ScaleCommand(revision=old.id, count=9, t=0.0)
    assert apply_scale(cmd, observed) == []


# -- live platform convergence -------------------------------------------------


def _platform(tmp_path, **config_kwargs):
    cfg = PlatformConfig(model_root=tmp_path / "models", **config_kwargs)
    return Platform(LoopClock(), cfg)


def test_platform_converges_min_replicas_and_serves(tmp_path):
    async def main():
        platform = _platform(tmp_path)
        await platform.start()
        doc = service_doc(
            "svc", linear_uri(tmp_path),
            annotations={"autoscaling.minReplicas": 1},
        )
        result = platform.apply_document(doc)
        assert result["generation"] == 1
        assert await platform.wait_settled(timeout=30.0)
        response = await platform.predict("svc", [[3, 5, 1]])
        status = platform.status("svc")
        await platform.stop()
        return response, status

    response, status = run_simulation(main())
    assert response.status == 200
    assert response.outputs == [7.5]
    assert status["conditions"]["Ready"] is True
    assert status["revisions"][0]["readyReplicas"] == 1


def test_platform_idempotent_reapply_causes_no_actions(tmp_path):
    async def main():
        platform = _platform(tmp_path)
        await platform.start()
        doc = service_doc(
            "svc", linear_uri(tmp_path),
            annotations={"autoscaling.minReplicas": 1},
        )
        platform.apply_document(doc)
        await platform.wait_settled(timeout=30.0)
        await platform.clock.sleep(5.0)
        churn_kinds = ("replica_state", "routing_swap", "revision_registered",
                       "revision_removed")
        before = len(platform.event_log.of_kind(*churn_kinds))
        platform.apply_document(doc)
        await platform.wait_settled(timeout=30.0)
        await platform.clock.sleep(5.0)
        after = len(platform.event_log.of_kind(*churn_kinds))
        status = platform.status("svc")
        await platform.stop()
        return before, after, status

    before, after, status = run_simulation(main())
    assert after == before  # second identical apply is a no-op
    assert status["generation"] == 2
    assert status["observedGeneration"] == 2


def _fixed_point_fingerprint(status):
    return {
        "traffic": status["traffic"],
        "revisions": sorted(
            (r["id"], r["role"], r["readyReplicas"]) for r in status["revisions"]
        ),
        "shadow": status["shadow"],
    }


def test_gitops_replay_converges_to_same_fixed_point(tmp_path):
    v1 = service_doc(
        "svc", linear_uri(tmp_path),
        annotations={"autoscaling.minReplicas": 1},
    )
    v2 = service_doc(
        "svc", linear_uri(tmp_path),
        canary_uri=linear_uri(tmp_path, name="lin2", weights=(1.0, 1.0, 1.0)),
        percent=10,
        annotations={"autoscaling.minReplicas": 1},
    )

    def run_sequence(docs):
        async def main():
            platform = _platform(tmp_path)
            await platform.start()
            for doc in docs:
                platform.apply_document(doc)
                await platform.wait_settled(timeout=60.0)
                await platform.clock.sleep(10.0)
            status = platform.status("svc")
            await platform.stop()
            return _fixed_point_fingerprint(status)

        return run_simulation(main())

    assert run_sequence([v1, v2, v1]) == run_sequence([v1])


def test_platform_promote_reuses_canary_revision(tmp_path):
    canary_uri = linear_uri(tmp_path, name="flowers-2", weights=(1.0, 1.0, 1.0), bias=0.0)

    async def main():
        platform = _platform(tmp_path)
        await platform.start()
        doc = service_doc(
            "svc", linear_uri(tmp_path, name="flowers"),
            canary_uri=canary_uri, percent=10,
            annotations={"autoscaling.minReplicas": 1},
        )
        platform.apply_document(doc)
        await platform.wait_settled(timeout=60.0)
        canary_rev = next(
            r for r in platform.status("svc")["revisions"] if r["role"] == "canary"
        )
        platform.promote("svc")
        await platform.wait_settled(timeout=120.0)
        await platform.clock.sleep(10.0)
        status = platform.status("svc")
        response = await platform.predict("svc", [[2, 2, 2]])
        with pytest.raises(NoCanary):
            platform.promote("svc")
        await platform.stop()
        return canary_rev, status, response

    canary_rev, status, response = run_simulation(main())
    assert len(status["revisions"]) == 1
    assert status["revisions"][0]["id"] == canary_rev["id"]  # same content hash
    assert status["revisions"][0]["role"] == "default"
    assert status["traffic"] == {canary_rev["id"]: 100}
    assert response.outputs == [6.0]  # served by the promoted model (w=1,1,1 b=0)


def test_platform_rollback_keeps_old_serving(tmp_path):
    async def main():
        platform = _platform(tmp_path)
        await platform.start()
        good = service_doc(
            "svc", linear_uri(tmp_path),
            annotations={"autoscaling.minReplicas": 1},
        )
        platform.apply_document(good)
        await platform.wait_settled(timeout=60.0)
        bad = service_doc(
            "svc", f"file://{tmp_path}/does-not-exist",
            annotations={"autoscaling.minReplicas": 1},
        )
        platform.apply_document(bad)
        await platform.clock.sleep(60.0)
        status = platform.status("svc")
        response = await platform.predict("svc", [[3, 5, 1]])
        await platform.stop()
        return status, response

    status, response = run_simulation(main())
    assert "RollbackRequired" in status["conditions"]
    assert response.status == 200
    assert response.outputs == [7.5]  # old model still serving


def test_platform_delete_tears_everything_down(tmp_path):
    async def main():
        platform = _platform(tmp_path)
        await platform.start()
        platform.apply_document(
            service_doc(
                "svc", linear_uri(tmp_path),
                annotations={"autoscaling.minReplicas": 2},
            )
        )
        await platform.wait_settled(timeout=60.0)
        await platform.delete("svc")
        gone = platform.list_services()
        response = await platform.predict("svc", [[1, 2, 3]])
        await platform.stop()
        return gone, response

    gone, response = run_simulation(main())
    assert gone == []
    assert response.status == 404
