"""Fixed-step simulation loop.

Systems are registered with an interval in steps and run in registration
order each step, which is the phase order: arrivals, request progress,
settle, probes, telemetry, autoscaler sync, actuation.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

from gapsim.app import AppModel, CallPattern, EndpointSpec, ErrorMode, ServiceSpec, ServiceTopology, StressWindow
from gapsim.autoscalers import get_policy
from gapsim.autoscalers.common import Policy, PolicyInput, ScalingDecision, ServiceView
from gapsim.cluster import (
    BootProfile,
    Cluster,
    Deployment,
    NamespaceQuota,
    Node,
    ProbeConfig,
    ProbeKind,
    ResourceSpec,
)
from gapsim.config import DEBUG_CHECKS
from gapsim.gaps import SimulationPlan, assemble
from gapsim.rng import SeededRng
from gapsim.scenario import ProbeModel, ScenarioConfig, ScenarioError
from gapsim.telemetry import ENTRY_SERIES, RunReport, Telemetry
from gapsim.workload import ClosedLoop, Generator, OpenLoop, RateSource, UserPool, load_trace

_logger = logging.getLogger("gapsim")


@dataclass
class SimClock:
    step_ms: int
    now_ms: int = 0
    step_index: int = 0

    def __post_init__(self) -> None:
        if self.step_ms <= 0:
            raise ValueError(f"step_ms must be > 0, got {self.step_ms}")

    def advance(self) -> None:
        self.step_index += 1
        self.now_ms = self.step_index * self.step_ms


@dataclass(frozen=True)
class StepContext:
    tick: int  # 1-based; step `tick` covers [t0, t1)
    t0: float
    t1: float

    @property
    def dt(self) -> float:
        return self.t1 - self.t0


def _probe(kind: ProbeKind, p: ProbeModel | None) -> ProbeConfig | None:
    if p is None:
        return None
    return ProbeConfig(kind, p.initial_delay_ms, p.period_ms, p.timeout_ms,
                       p.failure_threshold, p.success_threshold)


def build_topology(scenario: ScenarioConfig, plan: SimulationPlan) -> ServiceTopology:
    services = []
    for s in scenario.topology.services:
        endpoints = []
        for e in s.endpoints:
            mode = plan.error_handling.modes.get(f"{s.name}/{e.name}", e.error_mode)
            endpoints.append(EndpointSpec(
                name=e.name,
                cpu_demand_ms=e.cpu_demand_ms,
                downstream=tuple((c.service, c.endpoint) for c in e.downstream),
                call_pattern=CallPattern(e.call_pattern),
                timeout_ms=e.timeout_ms,
                max_queue=e.max_queue,
                error_mode=ErrorMode(mode),
            ))
        services.append(ServiceSpec(s.name, tuple(endpoints), deployment_ref=s.name))
    entry = scenario.topology.entry
    return ServiceTopology(services, (entry.service, entry.endpoint))


def build_cluster(scenario: ScenarioConfig, plan: SimulationPlan) -> Cluster:
    names = scenario.node_names()
    nodes = [Node(name, n.capacity_mcores) for name, n in zip(names, scenario.cluster.nodes)]
    deployments = []
    for svc in scenario.service_names():
        d = plan.deployments[svc]
        b = d.boot
        deployments.append(Deployment(
            service=svc,
            namespace=d.namespace,
            min_replicas=d.scaling.min_replicas,
            max_replicas=d.scaling.max_replicas,
            resources=ResourceSpec(d.resources.request_mcores, d.resources.limit_mcores,
                                   d.resources.memory_mb),
            boot=BootProfile(b.init_duration_ms, b.boot_duration_ms, b.boot_cpu_demand_mcores,
                             b.init_isolated, b.boot_burst_limit_mcores, b.startup_counted),
            replicas_desired=d.scaling.initial_replicas,
            scale_rate_limit=d.scaling.scale_rate_limit,
            readiness=_probe(ProbeKind.READINESS, d.probes.readiness),
            liveness=_probe(ProbeKind.LIVENESS, d.probes.liveness),
            node_pin=d.node,
        ))
    quotas = {
        q.namespace: NamespaceQuota(q.namespace, q.cpu_request_cap_mcores, q.memory_cap_mb)
        for q in plan.governance.quotas
    }
    return Cluster(nodes, deployments, quotas)


class Simulation:
    """One run: the cluster, the app on top of it, telemetry, workload and a policy."""

    def __init__(self, scenario: ScenarioConfig, plan: SimulationPlan, policy: Policy,
                 seed: int | None = None, debug_checks: bool = DEBUG_CHECKS):
        self.scenario = scenario
        self.plan = plan
        self.policy = policy
        self.seed = scenario.seed if seed is None else seed
        self.debug_checks = debug_checks
        self.clock = SimClock(scenario.step_ms)
        self._systems: list[tuple[int, Callable[[StepContext], None]]] = []

        self.cluster = build_cluster(scenario, plan)
        self.topology = build_topology(scenario, plan)
        override = plan.call_graph.pattern_override
        self.pattern_override = CallPattern(override) if override else None
        self.telemetry = Telemetry(
            scenario.service_names(), scenario.slo_ms,
            app_metrics=plan.telemetry.app_metrics,
            error_metrics=plan.telemetry.error_metrics,
            masked_error_metrics=plan.telemetry.masked_error_metrics,
            mesh=plan.call_graph.mesh,
            utilization_window_ms=scenario.telemetry.utilization_window_ms,
            latency_window_ms=scenario.telemetry.latency_window_ms,
        )
        jitter = SeededRng(self.seed, "jitter") if scenario.workload.jitter else None
        self.app = AppModel(
            self.topology, self.cluster, self.telemetry,
            pattern_override=self.pattern_override,
            stress=[StressWindow(s.service, s.demand_multiplier, s.start_ms, s.end_ms)
                    for s in scenario.stress],
            jitter=jitter,
        )
        self.cluster.on_pod_removed = self.telemetry.forget_pod
        self.static_edges = (
            tuple(self.topology.static_edges(self.pattern_override))
            if plan.call_graph.static_edges else None
        )
        self.call_tree = self.topology.call_tree(self.pattern_override)
        self._called_endpoints = self._walk_endpoints()

        self.open_loop: OpenLoop | None = None
        self.closed_loop: ClosedLoop | None = None
        self._build_workload()

        self._served: dict = {}
        self.pending: dict[str, ScalingDecision] = {}
        self.decisions: list[dict[str, object]] = []
        self.quota_exceeded = 0
        self.watchdog_restarts = 0
        self._seed_pods()

        sync_every = scenario.sync_period_ms // scenario.step_ms
        every = scenario.report.timeseries_every_ms or scenario.sync_period_ms
        self.register(self.arrivals)
        self.register(self.progress)
        self.register(self.settle)
        self.register(self.probes)
        self.register(self.sample)
        if plan.error_handling.watchdog is not None:
            self.register(self.watchdog, every_n_ticks=sync_every)
        self.register(self.sync, every_n_ticks=sync_every)
        self.register(self.actuate)
        if self.debug_checks:
            self.register(self.check)
        self.register(self.export, every_n_ticks=max(1, every // scenario.step_ms))

    # -- setup -------------------------------------------------------------

    def register(self, on_tick: Callable[[StepContext], None], every_n_ticks: int = 1) -> None:
        self._systems.append((every_n_ticks, on_tick))

    def _build_workload(self) -> None:
        w = self.scenario.workload
        if w.mode == "closed":
            self.closed_loop = ClosedLoop(UserPool(w.users, w.think_time_ms),
                                          SeededRng(self.seed, "closed-loop"))
            self.closed_loop.bind(self.app.inject)
            self.app.on_request_finished.append(
                lambda r: self.closed_loop.on_complete(r.id, r.completion_ms))  # type: ignore[union-attr]
            return
        rng = SeededRng(self.seed, "arrivals")
        trace = self.scenario.trace_path()
        if trace is not None:
            source = load_trace(trace, w.scale_factor, w.loop)
        else:
            assert w.generator is not None
            source = RateSource(Generator(**w.generator.model_dump()).rate_at, w.scale_factor)
        self.open_loop = OpenLoop(source, rng)

    def _seed_pods(self) -> None:
        warm = self.scenario.warm_start
        for dep in self.cluster.deployments.values():
            for _ in range(dep.replicas_desired):
                if not self.cluster.quota_allows(dep):
                    _logger.warning(f"Quota leaves {dep.service} short of its initial replicas")
                    break
                self.cluster.create_pod(dep, 0.0, warm=warm)

    def _walk_endpoints(self) -> dict[str, EndpointSpec]:
        """First endpoint of each service reached from the entry."""
        seen: dict[str, EndpointSpec] = {}
        stack = [self.topology.entry]
        while stack:
            svc, name = stack.pop()
            if svc in seen:
                continue
            ep = self.topology.endpoint(svc, name)
            seen[svc] = ep
            stack.extend(reversed(ep.downstream))
        return seen

    # -- phases ------------------------------------------------------------

    def arrivals(self, ctx: StepContext) -> None:
        if self.open_loop is not None:
            for t in self.open_loop.arrivals_in_step(ctx.t0, ctx.t1):
                self.app.inject(t)
        elif self.closed_loop is not None:
            for t, user in self.closed_loop.arrivals_in_step(ctx.t0, ctx.t1):
                req = self.app.inject(t)
                self.closed_loop.issued(req.id, user)

    def progress(self, ctx: StepContext) -> None:
        self.cluster.allocate()
        self._served = self.app.step(ctx.t0, ctx.t1)

    def settle(self, ctx: StepContext) -> None:
        self.cluster.settle(ctx.t0, ctx.t1, self._served)

    def probes(self, ctx: StepContext) -> None:
        self.cluster.probe_all(ctx.t1)

    def sample(self, ctx: StepContext) -> None:
        self.telemetry.sample(ctx.t1, ctx.dt, self.cluster)

    def watchdog(self, ctx: StepContext) -> None:
        """Restart pods whose failure log crossed the threshold in the window."""
        wd = self.plan.error_handling.watchdog
        assert wd is not None
        for svc in wd.services:
            for pod in list(self.cluster.deployments[svc].live_pods):
                failures = self.telemetry.pod_failures(pod, ctx.t1, wd.window_ms)
                if failures > wd.failure_threshold:
                    _logger.debug(f"{ctx.t1:.0f}ms watchdog restarts {pod.id} ({failures} failures)")
                    self.cluster.restart_pod(pod, ctx.t1, "watchdog")
                    self.telemetry.forget_pod(pod)
                    self.watchdog_restarts += 1

    def policy_input(self, now_ms: float) -> PolicyInput:
        tel = self.telemetry
        views = {}
        demands = {}
        for svc, dep in self.cluster.deployments.items():
            view_pods = self.cluster.metrics_view(dep)
            cap = dep.resources.limit_mcores
            if cap is None:
                cap = self.cluster.nodes[0].capacity_mcores
            views[svc] = ServiceView(
                service=svc,
                current=dep.replicas_desired,
                ready_count=len(view_pods),
                min_replicas=dep.min_replicas,
                max_replicas=dep.max_replicas,
                utilization=tel.utilization(dep, view_pods, now_ms),
                p90_ms=tel.p90(svc, now_ms),
                mean_latency_ms=tel.mean_latency(svc, now_ms),
                request_rate_rps=tel.request_rate(svc, now_ms),
                error_rate=tel.error_rate(svc, now_ms) if tel.error_metrics else None,
                capacity_mcores=float(cap),
            )
            ep = self._called_endpoints.get(svc)
            if ep is not None:
                d = ep.cpu_demand_ms
                for s in self.app.stress:
                    if s.service == svc and s.active(now_ms):
                        d *= s.demand_multiplier
                demands[svc] = d
        entry_svc = self.topology.entry[0]
        return PolicyInput(
            now_ms=now_ms,
            sync_period_ms=self.scenario.sync_period_ms,
            slo_ms=self.scenario.slo_ms,
            entry_service=entry_svc,
            services=views,
            entry_p90_ms=tel.p90(ENTRY_SERIES, now_ms),
            entry_mean_ms=tel.mean_latency(ENTRY_SERIES, now_ms),
            entry_rate_rps=tel.request_rate(entry_svc, now_ms),
            call_graph=tel.observed_call_graph(now_ms),
            static_edges=self.static_edges,
            call_tree=self.call_tree,
            ground_truth_demand_ms=demands,
        )

    def sync(self, ctx: StepContext) -> None:
        self.cluster.begin_sync()
        for d in self.policy.decide(self.policy_input(ctx.t1)):
            if d.service not in self.cluster.deployments:
                _logger.warning(f"Policy {self.policy.name} targeted unknown service {d.service}")
                continue
            self.pending[d.service] = d

    def actuate(self, ctx: StepContext) -> None:
        for svc, dep in self.cluster.deployments.items():
            decision = self.pending.pop(svc, None)
            if decision is None:
                self.cluster.reconcile(dep, ctx.t1)
                continue
            current = dep.replicas_desired
            result = self.cluster.scale_to(dep, decision.target_replicas, ctx.t1)
            if result.quota_blocked:
                self.quota_exceeded += 1
            self.decisions.append({
                "sync_ms": int(ctx.t1),
                "service": svc,
                "current": current,
                "target_pre_clamp": decision.target_replicas,
                "target_actuated": result.actuated,
                "reason": decision.reason,
            })
            _logger.debug(f"{ctx.t1:.0f}ms {svc}: {current} -> {result.actuated} ({decision.reason})")

    def check(self, ctx: StepContext) -> None:
        self.cluster.check_invariants()

    def export(self, ctx: StepContext) -> None:
        rep = self.telemetry.report
        rep.timeseries.append(self.telemetry.timeseries_row(ctx.t1, self.cluster))
        if self.scenario.report.pod_series:
            rep.pod_series.extend(self.telemetry.pod_rows(ctx.t1, self.cluster))

    # -- driving -----------------------------------------------------------

    def step(self) -> None:
        t0 = float(self.clock.now_ms)
        self.clock.advance()
        ctx = StepContext(self.clock.step_index, t0, float(self.clock.now_ms))
        for interval, system in self._systems:
            if ctx.tick % interval == 0:
                system(ctx)

    def run(self, duration_ms: int | None = None) -> RunReport:
        duration = self.scenario.duration_ms if duration_ms is None else duration_ms
        steps = math.ceil(duration / self.clock.step_ms)
        _logger.info(f"Running {self.scenario.name} with {self.policy.name}: {steps} steps, seed {self.seed}")
        for _ in range(steps):
            self.step()
        report = self.telemetry.finalize(self.cluster)
        report.decisions = list(self.decisions)
        report.quota_exceeded = self.quota_exceeded
        _logger.info(
            f"Finished {self.scenario.name}: {report.requests} requests, "
            f"{report.slo_violations} violations, {report.cpu_core_minutes:.3f} core-minutes"
        )
        return report


def build_simulation(scenario: ScenarioConfig, policy_name: str | None = None,
                     seed: int | None = None, debug_checks: bool = DEBUG_CHECKS) -> Simulation:
    """Assemble gaps, resolve the policy and wire a ready-to-run simulation."""
    plan = assemble(scenario)
    name = policy_name or scenario.autoscaler.name
    params = scenario.autoscaler.params if name == scenario.autoscaler.name else {}
    run_seed = scenario.seed if seed is None else seed
    try:
        policy = get_policy(name, params, seed=run_seed)
    except ValueError as e:
        raise ScenarioError(str(e)) from None
    return Simulation(scenario, plan, policy, seed=run_seed, debug_checks=debug_checks)


def run(scenario: ScenarioConfig, policy_name: str | None = None, seed: int | None = None,
        duration_ms: int | None = None, debug_checks: bool = DEBUG_CHECKS) -> RunReport:
    return build_simulation(scenario, policy_name, seed, debug_checks).run(duration_ms)
