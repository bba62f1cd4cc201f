"""Tests for gapsim.cluster -- contention, pod lifecycle, probes and quotas."""

import numpy as np
import pytest

from gapsim.cluster import (
    BootProfile,
    Cluster,
    Deployment,
    InvariantViolation,
    NamespaceQuota,
    Node,
    PodPhase,
    ProbeConfig,
    ProbeKind,
    ResourceSpec,
    allocate_cpu,
)
from gapsim.rng import SeededRng

from tests.conftest import step_cluster


def _water_level(capacity, demands, requests, limits):
    """Reference allocation by bisection on the fill level."""
    caps = [min(d, l) if l is not None else d for d, l in zip(demands, limits)]
    if sum(caps) <= capacity:
        return caps
    lo, hi = 0.0, max(c / w for c, w in zip(caps, requests))
    for _ in range(200):
        mid = (lo + hi) / 2
        if sum(min(c, mid * w) for c, w in zip(caps, requests)) > capacity:
            hi = mid
        else:
            lo = mid
    return [min(c, lo * w) for c, w in zip(caps, requests)]


# ---------------------------------------------------------------------------
# allocate_cpu
# ---------------------------------------------------------------------------

class TestAllocateCpu:
    def test_everyone_fits(self):
        assert allocate_cpu(1000, [100, 200], [100, 100], [None, 150]) == [100, 150]

    def test_proportional_to_requests(self):
        assert allocate_cpu(1000, [1000, 1000], [100, 300], [None, None]) == pytest.approx([250, 750])

    def test_small_demand_frozen_and_rest_redistributed(self):
        assert allocate_cpu(1000, [100, 1000], [1, 1], [None, None]) == pytest.approx([100, 900])

    def test_zero_capacity(self):
        assert allocate_cpu(0, [100, 100], [1, 1], [None, None]) == [0.0, 0.0]

    def test_zero_requests_share_equally(self):
        assert allocate_cpu(900, [1000, 1000, 1000], [0, 0, 0], [None] * 3) == pytest.approx([300] * 3)

    def test_matches_reference_on_random_cases(self):
        gen = SeededRng(11, "alloc-oracle").generator
        for _ in range(1000):
            n = int(gen.integers(1, 8))
            demands = [float(x) for x in gen.uniform(0, 2000, n)]
            requests = [float(x) for x in gen.integers(1, 1000, n)]
            limits = [None if gen.random() < 0.3 else float(x) for x in gen.uniform(1, 2000, n)]
            capacity = float(gen.uniform(100, 6000))
            got = allocate_cpu(capacity, demands, requests, limits)
            want = _water_level(capacity, demands, requests, limits)
            assert got == pytest.approx(want, abs=1e-6)
            assert sum(got) <= capacity + 1e-6
            for g, d, lim in zip(got, demands, limits):
                assert g <= d + 1e-9
                if lim is not None:
                    assert g <= lim + 1e-9

    def test_never_exceeds_capacity(self):
        got = allocate_cpu(500, [400, 400, 400], [100, 200, 300], [None, None, None])
        assert np.isclose(sum(got), 500)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

class TestSpecs:
    def test_limit_below_request(self):
        with pytest.raises(ValueError):
            ResourceSpec(500, 400)

    def test_probe_durations_positive(self):
        with pytest.raises(ValueError):
            ProbeConfig(ProbeKind.LIVENESS, 1000, 0, 1000)

    def test_probe_deadline(self):
        assert ProbeConfig(ProbeKind.LIVENESS, 30_000, 10_000, 1000, 3).deadline_ms == 60_000

    def test_boot_work(self):
        boot = BootProfile(init_duration_ms=1000, boot_duration_ms=300_000, boot_cpu_demand_mcores=400)
        assert boot.boot_work_cpu_ms == 120_000

    def test_burst_raises_boot_rate(self):
        boot = BootProfile(boot_duration_ms=1000, boot_cpu_demand_mcores=400, boot_burst_limit_mcores=1000)
        assert boot.boot_rate_mcores == 1000

    def test_min_above_max(self):
        with pytest.raises(ValueError):
            Deployment("svc", "ns", 3, 2, ResourceSpec(100, 100), BootProfile())

    def test_cluster_needs_nodes(self):
        with pytest.raises(ValueError):
            Cluster([], [])


# ---------------------------------------------------------------------------
# Lifecycle
# ---------------------------------------------------------------------------

class TestLifecycle:
    def test_init_then_boot_then_ready(self, make_cluster):
        cluster, dep = make_cluster(boot=BootProfile(init_duration_ms=1000, boot_duration_ms=2000,
                                                     boot_cpu_demand_mcores=200))
        pod = cluster.create_pod(dep, 0.0)
        assert pod.phase is PodPhase.INIT
        step_cluster(cluster, 9)
        assert pod.phase is PodPhase.INIT
        step_cluster(cluster, 1, start_ms=900)
        assert pod.phase is PodPhase.BOOTING
        assert pod.process_started_ms == 1000
        step_cluster(cluster, 19, start_ms=1000)
        assert pod.phase is PodPhase.BOOTING
        step_cluster(cluster, 1, start_ms=2900)
        assert pod.phase is PodPhase.READY
        assert pod.boot_done

    def test_warm_pod_starts_ready(self, make_cluster):
        cluster, dep = make_cluster(boot=BootProfile(boot_duration_ms=60_000, boot_cpu_demand_mcores=400))
        pod = cluster.create_pod(dep, 0.0, warm=True)
        assert pod.phase is PodPhase.READY
        assert pod.boot_done

    def test_readiness_gates_traffic(self, make_cluster):
        ready = ProbeConfig(ProbeKind.READINESS, 1000, 1000, 1000, 3, 1)
        cluster, dep = make_cluster(readiness=ready)
        pod = cluster.create_pod(dep, 0.0)
        step_cluster(cluster, 1)
        assert pod.phase is PodPhase.NOT_READY
        assert not pod.routable
        step_cluster(cluster, 18, start_ms=100)
        assert pod.phase is PodPhase.NOT_READY
        step_cluster(cluster, 1, start_ms=1900)
        assert pod.phase is PodPhase.READY
        assert cluster.routable_pods("svc") == [pod]

    def test_booting_pod_routable_without_readiness(self, make_cluster):
        cluster, dep = make_cluster(boot=BootProfile(boot_duration_ms=10_000, boot_cpu_demand_mcores=100))
        pod = cluster.create_pod(dep, 0.0)
        step_cluster(cluster, 1)
        assert pod.phase is PodPhase.BOOTING
        assert pod.routable

    def test_liveness_restart_loop(self, make_cluster):
        live = ProbeConfig(ProbeKind.LIVENESS, 3000, 1000, 1000, 3)
        cluster, dep = make_cluster(liveness=live,
                                    boot=BootProfile(boot_duration_ms=60_000, boot_cpu_demand_mcores=200))
        pod = cluster.create_pod(dep, 0.0)
        step_cluster(cluster, 59)
        assert pod.restart_count == 0
        step_cluster(cluster, 1, start_ms=5900)
        assert pod.restart_count == 1
        assert pod.phase is PodPhase.INIT
        assert cluster.restarts["svc"] == 1
        assert pod.boot_remaining_cpu_ms == dep.boot.boot_work_cpu_ms

    def test_illegal_transition(self, make_cluster):
        cluster, dep = make_cluster()
        pod = cluster.create_pod(dep, 0.0, warm=True)
        with pytest.raises(InvariantViolation):
            cluster.transition(pod, PodPhase.BOOTING, 0.0)

    def test_isolated_init_runs_boot_before_start(self, make_cluster):
        boot = BootProfile(init_duration_ms=0, boot_duration_ms=1000, boot_cpu_demand_mcores=200,
                           init_isolated=True)
        cluster, dep = make_cluster(boot=boot)
        pod = cluster.create_pod(dep, 0.0)
        step_cluster(cluster, 9)
        assert pod.phase is PodPhase.INIT
        assert not pod.routable
        step_cluster(cluster, 1, start_ms=900)
        assert pod.phase is PodPhase.READY
        assert pod.process_started_ms == 1000


# ---------------------------------------------------------------------------
# Scaling and quotas
# ---------------------------------------------------------------------------

class TestScaling:
    def test_scale_clamps_target(self, make_cluster):
        cluster, dep = make_cluster(max_replicas=3)
        result = cluster.scale_to(dep, 10, 0.0)
        assert result.requested == 10
        assert result.actuated == 3
        assert len(dep.live_pods) == 3

    def test_negative_target_rejected(self, make_cluster):
        cluster, dep = make_cluster()
        with pytest.raises(ValueError):
            cluster.scale_to(dep, -1, 0.0)

    def test_rate_limit_per_sync(self, make_cluster):
        cluster, dep = make_cluster(rate_limit=2)
        cluster.begin_sync()
        assert cluster.scale_to(dep, 5, 0.0).created == 2
        assert cluster.reconcile(dep, 100.0).created == 0
        cluster.begin_sync()
        assert cluster.reconcile(dep, 15_000.0).created == 2
        cluster.begin_sync()
        assert cluster.reconcile(dep, 30_000.0).created == 1
        assert len(dep.live_pods) == 5

    def test_quota_blocks_creation(self, make_cluster):
        cluster, dep = make_cluster(request=500, limit=500,
                                    quota=NamespaceQuota("ns", cpu_request_cap_mcores=1000))
        result = cluster.scale_to(dep, 5, 0.0)
        assert result.created == 2
        assert result.quota_blocked == 3
        assert cluster.namespace_requests("ns") == (1000, 200)

    def test_scale_down_terminates_newest(self, make_cluster):
        cluster, dep = make_cluster()
        removed = []
        cluster.on_pod_removed = removed.append
        cluster.scale_to(dep, 3, 0.0)
        for pod in dep.pods:
            cluster.transition(pod, PodPhase.READY, 0.0)
        result = cluster.scale_to(dep, 1, 0.0)
        assert result.terminated == 2
        assert sorted(p.seq for p in dep.pods if p.phase is PodPhase.TERMINATING) == [1, 2]
        step_cluster(cluster, 1)
        assert [p.seq for p in dep.pods] == [0]
        assert sorted(p.seq for p in removed) == [1, 2]

    def test_pods_spread_round_robin(self):
        dep = Deployment("svc", "ns", 1, 4, ResourceSpec(100, 100), BootProfile())
        cluster = Cluster([Node("a", 1000), Node("b", 1000)], [dep])
        cluster.scale_to(dep, 4, 0.0)
        assert [p.node.name for p in dep.pods] == ["a", "b", "a", "b"]

    def test_node_pin(self):
        dep = Deployment("svc", "ns", 1, 4, ResourceSpec(100, 100), BootProfile(), node_pin="b")
        cluster = Cluster([Node("a", 1000), Node("b", 1000)], [dep])
        cluster.scale_to(dep, 2, 0.0)
        assert {p.node.name for p in dep.pods} == {"b"}


# ---------------------------------------------------------------------------
# Metrics view and invariants
# ---------------------------------------------------------------------------

class TestMetricsView:
    def test_booting_excluded_with_readiness(self, make_cluster):
        ready = ProbeConfig(ProbeKind.READINESS, 1000, 1000, 1000)
        cluster, dep = make_cluster(readiness=ready,
                                    boot=BootProfile(boot_duration_ms=10_000, boot_cpu_demand_mcores=100))
        cluster.create_pod(dep, 0.0)
        step_cluster(cluster, 1)
        assert cluster.metrics_view(dep) == []

    def test_booting_counted_when_startup_counted(self, make_cluster):
        ready = ProbeConfig(ProbeKind.READINESS, 1000, 1000, 1000)
        boot = BootProfile(boot_duration_ms=10_000, boot_cpu_demand_mcores=100, startup_counted=True)
        cluster, dep = make_cluster(readiness=ready, boot=boot)
        pod = cluster.create_pod(dep, 0.0)
        step_cluster(cluster, 1)
        assert cluster.metrics_view(dep) == [pod]

    def test_health_response_slows_under_contention(self, make_cluster):
        cluster, dep = make_cluster()
        pod = cluster.create_pod(dep, 0.0, warm=True)
        pod.cpu_demand_mcores = 800
        pod.cpu_entitled_mcores = 200
        assert cluster.health_response_ms(pod) == pytest.approx(4 * cluster.health_check_cost_ms)
        pod.cpu_demand_mcores = 0
        assert cluster.health_response_ms(pod) == cluster.health_check_cost_ms


class TestInvariants:
    def test_clean_cluster_passes(self, make_cluster):
        cluster, dep = make_cluster()
        cluster.scale_to(dep, 2, 0.0)
        step_cluster(cluster, 5)
        cluster.check_invariants()

    def test_over_allocation_detected(self, make_cluster):
        cluster, dep = make_cluster(capacity=1000)
        cluster.scale_to(dep, 1, 0.0)
        dep.pods[0].cpu_entitled_mcores = 2000
        with pytest.raises(InvariantViolation):
            cluster.check_invariants()
