"""Kubernetes-like cluster: nodes, deployments, pod lifecycle, probes, quotas.

CPU is the only dynamic resource.  Each step the cluster computes per-pod
demand, water-fills node capacity into entitlements, and after the app model
has run requests against those entitlements it settles boot progress,
lifecycle transitions and the drain of terminating pods.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

from gapsim.config import DRAIN_TIMEOUT_MS, HEALTH_CHECK_COST_MS

if TYPE_CHECKING:
    from gapsim.app import PodQueue

_logger = logging.getLogger("gapsim")

_EPS = 1e-6


class InvariantViolation(AssertionError):
    """A conservation, quota or lifecycle invariant failed during a debug run."""


class PodPhase(Enum):
    INIT = "init"
    BOOTING = "booting"
    READY = "ready"
    NOT_READY = "not_ready"
    TERMINATING = "terminating"


class ProbeKind(Enum):
    READINESS = "readiness"
    LIVENESS = "liveness"


_LIVE = (PodPhase.INIT, PodPhase.BOOTING, PodPhase.READY, PodPhase.NOT_READY)

# Lifecycle graph; restarts (-> INIT) and termination are allowed from any live phase.
_TRANSITIONS: dict[PodPhase, set[PodPhase]] = {
    PodPhase.INIT: {PodPhase.BOOTING, PodPhase.READY, PodPhase.NOT_READY},
    PodPhase.BOOTING: {PodPhase.READY, PodPhase.NOT_READY},
    PodPhase.READY: {PodPhase.NOT_READY},
    PodPhase.NOT_READY: {PodPhase.READY},
    PodPhase.TERMINATING: set(),
}


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResourceSpec:
    request_mcores: int
    limit_mcores: int | None  # None = unbounded
    memory_mb: int = 0

    def __post_init__(self) -> None:
        if self.request_mcores < 0:
            raise ValueError(f"request_mcores must be >= 0, got {self.request_mcores}")
        if self.limit_mcores is not None and self.limit_mcores < self.request_mcores:
            raise ValueError(
                f"limit_mcores {self.limit_mcores} below request_mcores {self.request_mcores}"
            )

    @property
    def bounded(self) -> bool:
        return self.limit_mcores is not None


@dataclass(frozen=True)
class ProbeConfig:
    kind: ProbeKind
    initial_delay_ms: int
    period_ms: int
    timeout_ms: int
    failure_threshold: int = 3
    success_threshold: int = 1

    def __post_init__(self) -> None:
        if min(self.initial_delay_ms, self.period_ms, self.timeout_ms) <= 0:
            raise ValueError(f"{self.kind.value} probe durations must be > 0")
        if self.failure_threshold < 1 or self.success_threshold < 1:
            raise ValueError(f"{self.kind.value} probe thresholds must be >= 1")

    @property
    def deadline_ms(self) -> int:
        """Time after process start at which the failure threshold is first reached."""
        return self.initial_delay_ms + self.period_ms * self.failure_threshold


@dataclass(frozen=True)
class BootProfile:
    init_duration_ms: int = 0
    boot_duration_ms: int = 0
    boot_cpu_demand_mcores: int = 0
    init_isolated: bool = False
    boot_burst_limit_mcores: int | None = None
    startup_counted: bool = False  # booting pods count toward deployment metrics

    def __post_init__(self) -> None:
        if min(self.init_duration_ms, self.boot_duration_ms, self.boot_cpu_demand_mcores) < 0:
            raise ValueError("boot profile durations and demand must be >= 0")

    @property
    def boot_work_cpu_ms(self) -> float:
        return self.boot_duration_ms * self.boot_cpu_demand_mcores / 1000.0

    @property
    def boot_rate_mcores(self) -> float:
        if self.boot_burst_limit_mcores is not None:
            return float(max(self.boot_burst_limit_mcores, self.boot_cpu_demand_mcores))
        return float(self.boot_cpu_demand_mcores)


@dataclass(frozen=True)
class NamespaceQuota:
    namespace: str
    cpu_request_cap_mcores: int | None = None
    memory_cap_mb: int | None = None


# ---------------------------------------------------------------------------
# Runtime objects
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Node:
    name: str
    capacity_mcores: int
    pods: list[Pod] = field(default_factory=list)


@dataclass(eq=False)
class Pod:
    id: str
    seq: int
    deployment: Deployment
    node: Node
    phase: PodPhase
    phase_entered_ms: float
    created_ms: float
    process_started_ms: float | None = None
    boot_remaining_cpu_ms: float = 0.0
    boot_done: bool = False
    cpu_demand_mcores: float = 0.0
    cpu_entitled_mcores: float = 0.0
    cpu_alloc_mcores: float = 0.0  # consumed in the last step
    boot_share_mcores: float = 0.0
    restart_count: int = 0
    liveness_failure_streak: int = 0
    readiness_success_streak: int = 0
    readiness_failure_streak: int = 0
    next_liveness_ms: float = math.inf
    next_readiness_ms: float = math.inf
    terminate_deadline_ms: float = math.inf
    queue: PodQueue | None = None

    @property
    def live(self) -> bool:
        return self.phase in _LIVE

    @property
    def in_flight(self) -> int:
        return self.queue.in_flight if self.queue is not None else 0

    @property
    def routable(self) -> bool:
        if self.phase is PodPhase.READY:
            return True
        # Without a readiness probe the pod takes traffic as soon as its process runs.
        return self.deployment.readiness is None and self.phase is PodPhase.BOOTING


@dataclass(eq=False)
class Deployment:
    service: str
    namespace: str
    min_replicas: int
    max_replicas: int
    resources: ResourceSpec
    boot: BootProfile
    replicas_desired: int = 0
    scale_rate_limit: int | None = None
    readiness: ProbeConfig | None = None
    liveness: ProbeConfig | None = None
    node_pin: str | None = None
    pods: list[Pod] = field(default_factory=list)
    next_seq: int = 0
    created_this_sync: int = 0

    def __post_init__(self) -> None:
        if self.min_replicas > self.max_replicas:
            raise ValueError(f"{self.service}: min_replicas > max_replicas")

    @property
    def live_pods(self) -> list[Pod]:
        return [p for p in self.pods if p.live]

    @property
    def ready_pods(self) -> list[Pod]:
        return [p for p in self.pods if p.phase is PodPhase.READY]

    def clamp(self, target: int) -> int:
        return max(self.min_replicas, min(self.max_replicas, target))


@dataclass
class ScaleResult:
    service: str
    requested: int
    actuated: int
    created: int = 0
    terminated: int = 0
    quota_blocked: int = 0


# ---------------------------------------------------------------------------
# Contention
# ---------------------------------------------------------------------------

def allocate_cpu(capacity: float, demands: Sequence[float], requests: Sequence[float],
                 limits: Sequence[float | None]) -> list[float]:
    """Weighted max-min fair share of a node's capacity (water-filling).

    Each pod is capped at min(demand, limit).  If the caps fit, everybody gets
    their cap; otherwise capacity is split in proportion to requests, pods
    whose cap is below their share are frozen at the cap, and the remainder is
    redistributed until no pod is frozen.
    """
    n = len(demands)
    caps = [
        max(0.0, min(d, lim) if lim is not None else d)
        for d, lim in zip(demands, limits)
    ]
    if capacity <= 0.0:
        return [0.0] * n
    if sum(caps) <= capacity:
        return caps

    alloc = [0.0] * n
    active = [i for i in range(n) if caps[i] > 0.0]
    remaining = float(capacity)
    while active:
        weights = [float(requests[i]) for i in active]
        total = sum(weights)
        if total <= 0.0:
            weights = [1.0] * len(active)
            total = float(len(active))
        shares = {i: remaining * w / total for i, w in zip(active, weights)}
        frozen = [i for i in active if caps[i] <= shares[i]]
        if not frozen:
            for i in active:
                alloc[i] = shares[i]
            break
        for i in frozen:
            alloc[i] = caps[i]
            remaining -= caps[i]
        active = [i for i in active if i not in frozen]
    return alloc


# ---------------------------------------------------------------------------
# Cluster
# ---------------------------------------------------------------------------

class Cluster:
    """Owns nodes, deployments and pods for a single simulation."""

    def __init__(self, nodes: list[Node], deployments: list[Deployment],
                 quotas: dict[str, NamespaceQuota] | None = None,
                 drain_timeout_ms: int = DRAIN_TIMEOUT_MS,
                 health_check_cost_ms: float = HEALTH_CHECK_COST_MS):
        if not nodes:
            raise ValueError("cluster needs at least one node")
        self.nodes = nodes
        self.deployments: dict[str, Deployment] = {d.service: d for d in deployments}
        self.quotas = quotas or {}
        self.drain_timeout_ms = drain_timeout_ms
        self.health_check_cost_ms = health_check_cost_ms
        self._rr = 0
        self.restarts: dict[str, int] = {d.service: 0 for d in deployments}
        self.on_pod_created: Callable[[Pod], None] | None = None
        self.on_pod_stopped: Callable[[Pod, float], None] | None = None
        self.on_pod_removed: Callable[[Pod], None] | None = None

    # -- pods --------------------------------------------------------------

    def _place(self, deployment: Deployment) -> Node:
        if deployment.node_pin is not None:
            for node in self.nodes:
                if node.name == deployment.node_pin:
                    return node
            raise ValueError(f"{deployment.service}: unknown node {deployment.node_pin!r}")
        node = self.nodes[self._rr % len(self.nodes)]
        self._rr += 1
        return node

    def create_pod(self, deployment: Deployment, now_ms: float, warm: bool = False) -> Pod:
        seq = deployment.next_seq
        deployment.next_seq += 1
        node = self._place(deployment)
        pod = Pod(
            id=f"{deployment.service}-{seq:04d}",
            seq=seq,
            deployment=deployment,
            node=node,
            phase=PodPhase.INIT,
            phase_entered_ms=now_ms,
            created_ms=now_ms,
            boot_remaining_cpu_ms=deployment.boot.boot_work_cpu_ms,
        )
        if warm:
            pod.phase = PodPhase.READY
            pod.boot_done = True
            pod.boot_remaining_cpu_ms = 0.0
            self._process_started(pod, now_ms)
        deployment.pods.append(pod)
        node.pods.append(pod)
        if self.on_pod_created:
            self.on_pod_created(pod)
        _logger.debug(f"{now_ms:.0f}ms created {pod.id} on {node.name} (warm={warm})")
        return pod

    def _process_started(self, pod: Pod, at_ms: float) -> None:
        dep = pod.deployment
        pod.process_started_ms = at_ms
        pod.liveness_failure_streak = 0
        pod.readiness_success_streak = 0
        pod.readiness_failure_streak = 0
        pod.next_liveness_ms = (
            at_ms + dep.liveness.initial_delay_ms + dep.liveness.period_ms
            if dep.liveness else math.inf
        )
        pod.next_readiness_ms = (
            at_ms + dep.readiness.initial_delay_ms + dep.readiness.period_ms
            if dep.readiness else math.inf
        )

    def transition(self, pod: Pod, phase: PodPhase, at_ms: float) -> None:
        if phase is not PodPhase.TERMINATING and phase is not PodPhase.INIT \
                and phase not in _TRANSITIONS[pod.phase]:
            raise InvariantViolation(f"{pod.id}: illegal transition {pod.phase.value} -> {phase.value}")
        if phase is PodPhase.INIT and not pod.live:
            raise InvariantViolation(f"{pod.id}: restart of a {pod.phase.value} pod")
        pod.phase = phase
        pod.phase_entered_ms = at_ms

    def restart_pod(self, pod: Pod, at_ms: float, reason: str) -> None:
        """Kill the main process; the pod goes back through init and boot."""
        if self.on_pod_stopped:
            self.on_pod_stopped(pod, at_ms)
        self.transition(pod, PodPhase.INIT, at_ms)
        pod.restart_count += 1
        self.restarts[pod.deployment.service] += 1
        pod.boot_done = False
        pod.boot_remaining_cpu_ms = pod.deployment.boot.boot_work_cpu_ms
        pod.process_started_ms = None
        pod.next_liveness_ms = math.inf
        pod.next_readiness_ms = math.inf
        pod.liveness_failure_streak = 0
        pod.readiness_success_streak = 0
        pod.readiness_failure_streak = 0
        _logger.debug(f"{at_ms:.0f}ms restarted {pod.id} ({reason}), restarts={pod.restart_count}")

    def _terminate(self, pod: Pod, at_ms: float) -> None:
        self.transition(pod, PodPhase.TERMINATING, at_ms)
        pod.terminate_deadline_ms = at_ms + self.drain_timeout_ms

    def _remove(self, pod: Pod, at_ms: float) -> None:
        if self.on_pod_stopped:
            self.on_pod_stopped(pod, at_ms)
        pod.deployment.pods.remove(pod)
        pod.node.pods.remove(pod)
        if self.on_pod_removed:
            self.on_pod_removed(pod)

    # -- views -------------------------------------------------------------

    def all_pods(self) -> list[Pod]:
        return [p for node in self.nodes for p in node.pods]

    def routable_pods(self, service: str) -> list[Pod]:
        return [p for p in self.deployments[service].pods if p.routable]

    def metrics_view(self, deployment: Deployment) -> list[Pod]:
        """Pods whose CPU counts toward the deployment's utilization."""
        count_booting = deployment.readiness is None or deployment.boot.startup_counted
        return [
            p for p in deployment.pods
            if p.phase is PodPhase.READY or (count_booting and p.phase is PodPhase.BOOTING)
        ]

    def namespace_requests(self, namespace: str) -> tuple[int, int]:
        cpu = mem = 0
        for dep in self.deployments.values():
            if dep.namespace == namespace:
                cpu += dep.resources.request_mcores * len(dep.pods)
                mem += dep.resources.memory_mb * len(dep.pods)
        return cpu, mem

    def quota_allows(self, deployment: Deployment) -> bool:
        quota = self.quotas.get(deployment.namespace)
        if quota is None:
            return True
        cpu, mem = self.namespace_requests(deployment.namespace)
        if quota.cpu_request_cap_mcores is not None \
                and cpu + deployment.resources.request_mcores > quota.cpu_request_cap_mcores:
            return False
        if quota.memory_cap_mb is not None \
                and mem + deployment.resources.memory_mb > quota.memory_cap_mb:
            return False
        return True

    # -- scaling -----------------------------------------------------------

    def begin_sync(self) -> None:
        for dep in self.deployments.values():
            dep.created_this_sync = 0

    def scale_to(self, deployment: Deployment, target: int, now_ms: float) -> ScaleResult:
        """Set the desired replica count (clamped) and reconcile pods toward it."""
        if target < 0:
            raise ValueError(f"{deployment.service}: negative scale target {target}")
        deployment.replicas_desired = deployment.clamp(target)
        result = self.reconcile(deployment, now_ms)
        result.requested = target
        return result

    def reconcile(self, deployment: Deployment, now_ms: float) -> ScaleResult:
        result = ScaleResult(deployment.service, deployment.replicas_desired, deployment.replicas_desired)
        live = deployment.live_pods
        surplus = len(live) - deployment.replicas_desired
        if surplus > 0:
            for pod in sorted(live, key=lambda p: p.seq, reverse=True)[:surplus]:
                self._terminate(pod, now_ms)
                result.terminated += 1
            return result
        for _ in range(-surplus):
            if deployment.scale_rate_limit is not None \
                    and deployment.created_this_sync >= deployment.scale_rate_limit:
                break
            if not self.quota_allows(deployment):
                result.quota_blocked = deployment.replicas_desired - len(deployment.live_pods)
                _logger.debug(
                    f"{now_ms:.0f}ms quota blocks {result.quota_blocked} {deployment.service} pods"
                )
                break
            self.create_pod(deployment, now_ms)
            deployment.created_this_sync += 1
            result.created += 1
        return result

    # -- per-step CPU ------------------------------------------------------

    def _serving_cap(self, pod: Pod) -> float:
        lim = pod.deployment.resources.limit_mcores
        return float(lim) if lim is not None else float(pod.node.capacity_mcores)

    def _pod_cap(self, pod: Pod) -> float | None:
        lim = pod.deployment.resources.limit_mcores
        burst = pod.deployment.boot.boot_burst_limit_mcores
        if lim is None:
            return None
        if burst is not None and not pod.boot_done and pod.phase in (PodPhase.INIT, PodPhase.BOOTING):
            return float(max(lim, burst))
        return float(lim)

    def _boot_demand(self, pod: Pod) -> float:
        boot = pod.deployment.boot
        if pod.boot_done or pod.boot_remaining_cpu_ms <= 0.0:
            return 0.0
        if pod.phase is PodPhase.BOOTING or (pod.phase is PodPhase.INIT and boot.init_isolated):
            return boot.boot_rate_mcores
        return 0.0

    def allocate(self) -> None:
        """Compute this step's demands and water-fill them into entitlements."""
        for node in self.nodes:
            demands, requests, limits = [], [], []
            for pod in node.pods:
                boot = self._boot_demand(pod)
                serving = self._serving_cap(pod) if (pod.routable or pod.in_flight > 0) else 0.0
                pod.cpu_demand_mcores = boot + serving
                demands.append(pod.cpu_demand_mcores)
                requests.append(pod.deployment.resources.request_mcores)
                limits.append(self._pod_cap(pod))
            entitled = allocate_cpu(node.capacity_mcores, demands, requests, limits)
            for pod, share in zip(node.pods, entitled):
                pod.cpu_entitled_mcores = share
                pod.boot_share_mcores = min(self._boot_demand(pod), share)

    def serving_rate(self, pod: Pod) -> float:
        return max(0.0, pod.cpu_entitled_mcores - pod.boot_share_mcores)

    def settle(self, t0: float, t1: float, serving_cpu_ms: dict[Pod, float]) -> None:
        """Close the step: record consumption, advance boot, move pods along the lifecycle."""
        dt = t1 - t0
        for pod in list(self.all_pods()):
            boot_used = 0.0
            if pod.boot_share_mcores > 0.0:
                boot_used = min(pod.boot_share_mcores * dt / 1000.0, pod.boot_remaining_cpu_ms)
                pod.boot_remaining_cpu_ms -= boot_used
            served = serving_cpu_ms.get(pod, 0.0)
            pod.cpu_alloc_mcores = (boot_used + served) * 1000.0 / dt if dt > 0 else 0.0

            if pod.phase is PodPhase.TERMINATING:
                if pod.in_flight == 0 or t1 >= pod.terminate_deadline_ms:
                    self._remove(pod, t1)
                continue

            boot = pod.deployment.boot
            if pod.phase is PodPhase.INIT:
                init_end = pod.phase_entered_ms + boot.init_duration_ms
                if t1 < init_end:
                    continue
                if boot.init_isolated:
                    if pod.boot_remaining_cpu_ms > _EPS:
                        continue
                    pod.boot_done = True
                    self._process_started(pod, t1)
                    self.transition(pod, self._post_boot_phase(pod), t1)
                else:
                    self._process_started(pod, init_end)
                    if pod.boot_remaining_cpu_ms > _EPS:
                        self.transition(pod, PodPhase.BOOTING, init_end)
                    else:
                        pod.boot_done = True
                        self.transition(pod, self._post_boot_phase(pod), init_end)
            elif pod.phase is PodPhase.BOOTING and pod.boot_remaining_cpu_ms <= _EPS:
                pod.boot_done = True
                self.transition(pod, self._post_boot_phase(pod), t1)

    @staticmethod
    def _post_boot_phase(pod: Pod) -> PodPhase:
        return PodPhase.NOT_READY if pod.deployment.readiness is not None else PodPhase.READY

    # -- probes ------------------------------------------------------------

    def health_response_ms(self, pod: Pod) -> float:
        """Modeled latency of the health endpoint under the pod's current share."""
        if pod.cpu_demand_mcores <= 0.0:
            return self.health_check_cost_ms  # idle
        if pod.cpu_entitled_mcores <= 0.0:
            return math.inf
        return self.health_check_cost_ms * max(1.0, pod.cpu_demand_mcores / pod.cpu_entitled_mcores)

    def probe_tick(self, pod: Pod, at_ms: float) -> PodPhase:
        """Run any readiness/liveness evaluations due by at_ms. Returns the resulting phase."""
        if pod.process_started_ms is None or not pod.live:
            return pod.phase
        dep = pod.deployment

        if dep.liveness is not None:
            while pod.next_liveness_ms <= at_ms:
                ok = pod.boot_done and self.health_response_ms(pod) <= dep.liveness.timeout_ms
                pod.next_liveness_ms += dep.liveness.period_ms
                if ok:
                    pod.liveness_failure_streak = 0
                    continue
                pod.liveness_failure_streak += 1
                if pod.liveness_failure_streak >= dep.liveness.failure_threshold:
                    self.restart_pod(pod, at_ms, "liveness")
                    return pod.phase

        if dep.readiness is not None:
            while pod.next_readiness_ms <= at_ms:
                ok = pod.boot_done and self.health_response_ms(pod) <= dep.readiness.timeout_ms
                pod.next_readiness_ms += dep.readiness.period_ms
                if ok:
                    pod.readiness_success_streak += 1
                    pod.readiness_failure_streak = 0
                    if pod.phase is PodPhase.NOT_READY \
                            and pod.readiness_success_streak >= dep.readiness.success_threshold:
                        self.transition(pod, PodPhase.READY, at_ms)
                else:
                    pod.readiness_failure_streak += 1
                    pod.readiness_success_streak = 0
                    if pod.phase is PodPhase.READY \
                            and pod.readiness_failure_streak >= dep.readiness.failure_threshold:
                        self.transition(pod, PodPhase.NOT_READY, at_ms)
        return pod.phase

    def probe_all(self, at_ms: float) -> None:
        for pod in list(self.all_pods()):
            self.probe_tick(pod, at_ms)

    # -- invariants --------------------------------------------------------

    def check_invariants(self) -> None:
        for node in self.nodes:
            total = sum(p.cpu_entitled_mcores for p in node.pods)
            if total > node.capacity_mcores + _EPS:
                raise InvariantViolation(
                    f"node {node.name}: allocations {total:.3f} exceed capacity {node.capacity_mcores}"
                )
            for pod in node.pods:
                cap = self._pod_cap(pod)
                if cap is not None and pod.cpu_alloc_mcores > cap + _EPS:
                    raise InvariantViolation(
                        f"{pod.id}: allocation {pod.cpu_alloc_mcores:.3f} over limit {cap:.0f}"
                    )
                if pod.cpu_alloc_mcores > pod.cpu_entitled_mcores + _EPS:
                    raise InvariantViolation(f"{pod.id}: consumed more than its entitlement")
        for ns, quota in self.quotas.items():
            cpu, mem = self.namespace_requests(ns)
            if quota.cpu_request_cap_mcores is not None and cpu > quota.cpu_request_cap_mcores:
                raise InvariantViolation(f"namespace {ns}: cpu requests {cpu} over quota")
            if quota.memory_cap_mb is not None and mem > quota.memory_cap_mb:
                raise InvariantViolation(f"namespace {ns}: memory {mem} over quota")
        for dep in self.deployments.values():
            if not dep.min_replicas <= dep.replicas_desired <= dep.max_replicas:
                raise InvariantViolation(f"{dep.service}: replicas_desired out of bounds")
