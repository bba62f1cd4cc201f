"""The G1-G10 gap catalog and the wiring that turns toggles into a simulation plan.

Each gap resolves to one of three states per run: flawed (active, not
remediated), remediated (its fix applied), or inactive (the scenario's declared
configuration is used).  `assemble` routes every state to exactly one subtree
of the plan, so a single toggle only ever changes its own mechanism.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from gapsim.display import format_table
from gapsim.scenario import (
    BootModel,
    InconsistentConfig,
    ProbeModel,
    ProbesModel,
    QuotaModel,
    ResourcesModel,
    ScenarioConfig,
    ScenarioError,
)

_logger = logging.getLogger("gapsim")

GAP_IDS = ("G1", "G2", "G3", "G4", "G5", "G6", "G7", "G8", "G9", "G10")


class GapStatus(Enum):
    ACTIVE = "active"
    REMEDIATED = "remediated"
    INACTIVE = "inactive"
    NOT_REPRESENTABLE = "not-representable"


@dataclass(frozen=True)
class GapDefinition:
    id: str
    name: str
    challenge: str
    category: str
    phase: str
    mechanism: str
    remediation: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "challenge": self.challenge,
            "category": self.category,
            "phase": self.phase,
            "mechanism": self.mechanism,
            "remediation": self.remediation,
        }


GAP_CATALOG: dict[str, GapDefinition] = {g.id: g for g in (
    GapDefinition("G1", "Service Initialization Overhead", "Scalability", "Heavy Services",
                  "Implementation", "deployments.boot",
                  "move startup work into an init container, or allow a CPU burst during boot"),
    GapDefinition("G2", "Scale-Out Resource Contention", "Scalability", "Heavy Services",
                  "Implementation", "deployments.scaling",
                  "cap replicas of the heavy service and limit pods created per sync"),
    GapDefinition("G3", "Missing Application-Level Metrics", "Observability", "Monitoring",
                  "Implementation", "telemetry.app_metrics",
                  "expose latency and error series with a health endpoint"),
    GapDefinition("G4", "Missing Readiness/Liveness configuration", "Observability", "Readiness",
                  "Deployment", "deployments.probes", "define readiness and liveness probes"),
    GapDefinition("G5", "Misconfigured Readiness/Liveness Probes", "Observability", "Readiness",
                  "Deployment", "deployments.probes", "tune probe delays to the boot time"),
    GapDefinition("G6", "Error Masking in Service Chains", "Observability", "Failure Visibility",
                  "Implementation", "error_handling",
                  "propagate downstream errors, or watch failure logs and restart"),
    GapDefinition("G7", "Lack of Downstream Error Metrics", "Observability", "Failure Visibility",
                  "Implementation", "telemetry.error_metrics", "not applicable (error counters modeled)"),
    GapDefinition("G8", "Incomplete or Misleading Call Graphs", "Observability", "Dependencies",
                  "Architecture", "call_graph",
                  "hardcode the dependency graph, switch to chained calls, or add a mesh"),
    GapDefinition("G9", "Unbounded Resource Requests", "Security", "Resource Governance",
                  "Deployment", "deployments.resources", "not applicable (limits already defined)"),
    GapDefinition("G10", "Lack of Namespace-Level Safeguards", "Security", "Resource Governance",
                  "Deployment", "governance", "namespace quotas and replica caps"),
)}

MATRIX_COLUMNS = ("Heavy Services", "Monitoring", "Readiness", "Failure Visibility",
                  "Dependencies", "Resource Governance")

# Issues observed per benchmark, in MATRIX_COLUMNS order.
BENCHMARK_MATRIX: dict[str, tuple[bool, ...]] = {
    "Bookinfo": (True, False, False, False, False, False),
    "Online Boutique": (True, False, True, False, False, True),
    "Sock Shop": (True, True, True, True, True, False),
    "TrainTicket": (True, True, True, True, False, True),
}

BENCHMARK_INFO: dict[str, str] = {
    "Bookinfo": "4 services; Java, Python, Node.js, Ruby",
    "Online Boutique": "11 services",
    "Sock Shop": "13 services",
    "TrainTicket": "41 services",
}


def gaps_in_category(category: str) -> list[str]:
    return [g.id for g in GAP_CATALOG.values() if g.category == category]


def gaps_in_phase(phase: str) -> list[str]:
    return [g.id for g in GAP_CATALOG.values() if g.phase == phase]


# ---------------------------------------------------------------------------
# Plan
# ---------------------------------------------------------------------------

class _Plan(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScalingPlan(_Plan):
    min_replicas: int
    max_replicas: int
    initial_replicas: int
    scale_rate_limit: int | None
    frozen: bool = False


class DeploymentPlan(_Plan):
    service: str
    namespace: str
    node: str | None
    boot: BootModel
    scaling: ScalingPlan
    probes: ProbesModel
    resources: ResourcesModel


class TelemetryPlan(_Plan):
    app_metrics: dict[str, bool]
    error_metrics: bool
    masked_error_metrics: bool = False


class WatchdogPlan(_Plan):
    services: list[str]
    failure_threshold: int
    window_ms: int


class ErrorHandlingPlan(_Plan):
    modes: dict[str, Literal["propagate", "mask"]] = Field(default_factory=dict)  # "svc/endpoint"
    watchdog: WatchdogPlan | None = None


class CallGraphPlan(_Plan):
    pattern_override: Literal["chained", "fan_out"] | None = None
    mesh: bool = True
    static_edges: bool = False


class GovernancePlan(_Plan):
    quotas: list[QuotaModel] = Field(default_factory=list)
    replica_cap: int | None = None


class SimulationPlan(_Plan):
    """Everything the step loop needs beyond the workload and the autoscaler."""
    deployments: dict[str, DeploymentPlan]
    telemetry: TelemetryPlan
    error_handling: ErrorHandlingPlan
    call_graph: CallGraphPlan
    governance: GovernancePlan
    status: dict[str, GapStatus]

    def mechanisms(self) -> dict[str, Any]:
        """The plan without gap bookkeeping, for structural comparison."""
        return self.model_dump(exclude={"status"})


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------

def _has_calls(scenario: ScenarioConfig) -> bool:
    return any(e.downstream for s in scenario.topology.services for e in s.endpoints)


def representable(scenario: ScenarioConfig, gap: str) -> bool:
    if gap in ("G6", "G7", "G8"):
        return _has_calls(scenario)
    return True


def resolve(scenario: ScenarioConfig) -> dict[str, GapStatus]:
    """Status per gap; a remediation wins over an active flag."""
    out = {}
    for gid in GAP_IDS:
        gap = getattr(scenario.gaps, gid.lower())
        fix = getattr(scenario.remediations, gid.lower())
        if not representable(scenario, gid):
            if fix.applied:
                raise InconsistentConfig(f"{gid} remediation", f"{gid} gap",
                                         "the topology has no downstream calls")
            out[gid] = GapStatus.NOT_REPRESENTABLE
        elif fix.applied:
            out[gid] = GapStatus.REMEDIATED
        elif gap.active:
            out[gid] = GapStatus.ACTIVE
        else:
            out[gid] = GapStatus.INACTIVE
    return out


def _targets(scenario: ScenarioConfig, services: list[str] | None, gid: str) -> list[str]:
    names = scenario.service_names()
    if services is None:
        return names
    unknown = [s for s in services if s not in names]
    if unknown:
        raise ScenarioError(f"{gid}: unknown services {unknown}")
    return list(services)


def _base_deployments(scenario: ScenarioConfig) -> dict[str, DeploymentPlan]:
    namespaces = {s.name: s.namespace for s in scenario.topology.services}
    out = {}
    for d in scenario.deployments:
        initial = d.start_replicas
        out[d.service] = DeploymentPlan(
            service=d.service,
            namespace=namespaces[d.service],
            node=d.node,
            boot=d.boot.model_copy(),
            scaling=ScalingPlan(
                min_replicas=initial if d.frozen else d.min_replicas,
                max_replicas=initial if d.frozen else d.max_replicas,
                initial_replicas=initial,
                scale_rate_limit=d.scale_rate_limit,
                frozen=d.frozen,
            ),
            probes=d.probes.model_copy(),
            resources=d.resources.model_copy(),
        )
    return out


def _apply_g1(scenario: ScenarioConfig, status: GapStatus, deps: dict[str, DeploymentPlan]) -> None:
    gap, fix = scenario.gaps.g1, scenario.remediations.g1
    if status is GapStatus.ACTIVE:
        for svc in _targets(scenario, gap.services, "G1"):
            boot = deps[svc].boot
            update: dict[str, Any] = {"init_isolated": False, "startup_counted": True,
                                      "boot_burst_limit_mcores": None}
            if gap.boot_cpu_mcores is not None:
                update["boot_cpu_demand_mcores"] = gap.boot_cpu_mcores
            deps[svc].boot = boot.model_copy(update=update)
    elif status is GapStatus.REMEDIATED:
        for svc in _targets(scenario, fix.services, "G1"):
            boot = deps[svc].boot
            if fix.strategy == "init_container":
                deps[svc].boot = boot.model_copy(update={"init_isolated": True, "startup_counted": False})
            else:
                deps[svc].boot = boot.model_copy(update={
                    "boot_burst_limit_mcores": fix.boot_burst_limit_mcores, "startup_counted": False})


def _apply_g2(scenario: ScenarioConfig, status: GapStatus, deps: dict[str, DeploymentPlan]) -> None:
    gap, fix = scenario.gaps.g2, scenario.remediations.g2
    if status is GapStatus.ACTIVE:
        for svc in _targets(scenario, gap.services, "G2"):
            if not deps[svc].scaling.frozen:
                deps[svc].scaling.scale_rate_limit = None
    elif status is GapStatus.REMEDIATED:
        for svc in _targets(scenario, fix.services, "G2"):
            sc = deps[svc].scaling
            if sc.frozen:
                continue
            if fix.rate_limit is not None:
                sc.scale_rate_limit = fix.rate_limit
            if fix.replica_cap is not None:
                sc.max_replicas = max(sc.min_replicas, min(sc.max_replicas, fix.replica_cap))
                sc.initial_replicas = min(sc.initial_replicas, sc.max_replicas)


def _app_metrics(scenario: ScenarioConfig, status: GapStatus) -> dict[str, bool]:
    metrics = {s: True for s in scenario.service_names()}
    if status is GapStatus.ACTIVE:
        for svc in _targets(scenario, scenario.gaps.g3.services, "G3"):
            metrics[svc] = False
    return metrics


def _apply_g4(scenario: ScenarioConfig, status: GapStatus, deps: dict[str, DeploymentPlan],
              app_metrics: dict[str, bool]) -> None:
    gap, fix = scenario.gaps.g4, scenario.remediations.g4
    if status is GapStatus.ACTIVE:
        for svc in _targets(scenario, gap.services, "G4"):
            deps[svc].probes = ProbesModel()
    elif status is GapStatus.REMEDIATED:
        for svc in _targets(scenario, fix.services, "G4"):
            if not app_metrics[svc]:
                raise InconsistentConfig("G4 remediation", "G3 gap",
                                         f"{svc} exposes no health endpoint to probe")
            declared = deps[svc].probes
            deps[svc].probes = ProbesModel(
                readiness=declared.readiness or fix.readiness.model_copy(),
                liveness=declared.liveness or (fix.liveness.model_copy() if fix.liveness else None),
            )


def _probed(deps: dict[str, DeploymentPlan]) -> list[str]:
    return [s for s, d in deps.items() if d.probes.readiness or d.probes.liveness]


def _apply_g5(scenario: ScenarioConfig, status: GapStatus, deps: dict[str, DeploymentPlan]) -> None:
    gap, fix = scenario.gaps.g5, scenario.remediations.g5
    if status is GapStatus.INACTIVE or status is GapStatus.NOT_REPRESENTABLE:
        return
    label = "G5 gap" if status is GapStatus.ACTIVE else "G5 remediation"
    services = gap.services if status is GapStatus.ACTIVE else fix.services
    probed = _probed(deps)
    targets = probed if services is None else _targets(scenario, services, "G5")
    missing = [s for s in targets if s not in probed]
    if not targets or missing:
        raise InconsistentConfig(label, "G4 gap", f"no probes defined for {missing or 'any service'}")
    for svc in targets:
        probes = deps[svc].probes
        if status is GapStatus.ACTIVE:
            deps[svc].probes = ProbesModel(
                readiness=gap.readiness.model_copy() if gap.readiness else probes.readiness,
                liveness=gap.liveness.model_copy(),
            )
        else:
            deps[svc].probes = ProbesModel(
                readiness=fix.readiness.model_copy(),
                liveness=fix.liveness.model_copy() if fix.liveness else None,
            )


def _callers(scenario: ScenarioConfig, callers) -> list[str]:
    if callers is None:
        entry = scenario.topology.entry
        return [f"{entry.service}/{entry.endpoint}"]
    eps = {(s.name, e.name) for s in scenario.topology.services for e in s.endpoints}
    out = []
    for c in callers:
        if (c.service, c.endpoint) not in eps:
            raise ScenarioError(f"G6: unknown endpoint {c.service}/{c.endpoint}")
        out.append(f"{c.service}/{c.endpoint}")
    return out


def _error_handling(scenario: ScenarioConfig, status: GapStatus) -> ErrorHandlingPlan:
    gap, fix = scenario.gaps.g6, scenario.remediations.g6
    plan = ErrorHandlingPlan()
    if status is GapStatus.ACTIVE:
        plan.modes = {k: "mask" for k in _callers(scenario, gap.callers)}
    elif status is GapStatus.REMEDIATED:
        callers = _callers(scenario, fix.callers)
        if fix.strategy == "propagate":
            plan.modes = {k: "propagate" for k in callers}
        else:
            plan.modes = {k: "mask" for k in callers}
            if fix.watch_services is None:
                entry = scenario.topology.entry
                ep = next(e for s in scenario.topology.services if s.name == entry.service
                          for e in s.endpoints if e.name == entry.endpoint)
                watch = sorted({c.service for c in ep.downstream})
            else:
                watch = _targets(scenario, fix.watch_services, "G6")
            plan.watchdog = WatchdogPlan(services=watch, failure_threshold=fix.failure_threshold,
                                         window_ms=fix.window_ms)
    return plan


def _call_graph(scenario: ScenarioConfig, status: GapStatus) -> CallGraphPlan:
    if status is GapStatus.ACTIVE:
        return CallGraphPlan(pattern_override="fan_out", mesh=False, static_edges=False)
    if status is GapStatus.REMEDIATED:
        strategy = scenario.remediations.g8.strategy
        if strategy == "hardcoded_graph":
            return CallGraphPlan(pattern_override=None, mesh=False, static_edges=True)
        if strategy == "chained":
            return CallGraphPlan(pattern_override="chained", mesh=True)
        return CallGraphPlan(mesh=True)
    return CallGraphPlan()


def _apply_g9(scenario: ScenarioConfig, status: GapStatus, deps: dict[str, DeploymentPlan]) -> None:
    for svc, dep in deps.items():
        res = dep.resources
        if status is GapStatus.ACTIVE:
            dep.resources = res.model_copy(update={"limit_mcores": None})
        elif status is GapStatus.REMEDIATED and res.limit_mcores is None:
            dep.resources = res.model_copy(update={"limit_mcores": res.request_mcores})
        elif res.limit_mcores is None:
            # An unbounded container is the G9 gap itself.
            raise ScenarioError(f"deployments.{svc}.resources.limit_mcores: unbounded limit requires gap G9")


def _governance(scenario: ScenarioConfig, status: GapStatus) -> GovernancePlan:
    if status is GapStatus.ACTIVE:
        return GovernancePlan()
    if status is GapStatus.REMEDIATED:
        fix = scenario.remediations.g10
        declared = sorted({s.namespace for s in scenario.topology.services})
        namespaces = declared if fix.namespaces is None else fix.namespaces
        unknown = [n for n in namespaces if n not in declared]
        if unknown:
            raise ScenarioError(f"G10: unknown namespaces {unknown}")
        return GovernancePlan(
            quotas=[QuotaModel(namespace=n, cpu_request_cap_mcores=fix.cpu_request_cap_mcores,
                               memory_cap_mb=fix.memory_cap_mb) for n in namespaces],
            replica_cap=fix.replica_cap,
        )
    return GovernancePlan(quotas=[q.model_copy() for q in scenario.cluster.namespace_quotas])


def assemble(scenario: ScenarioConfig) -> SimulationPlan:
    """Resolve every gap and route its state to its one mechanism.

    Raises InconsistentConfig for combinations without meaning (probe tuning
    with no probes, probes on a service without a health endpoint, fixing a
    gap the topology cannot exhibit).
    """
    status = resolve(scenario)
    deps = _base_deployments(scenario)
    _apply_g1(scenario, status["G1"], deps)
    _apply_g2(scenario, status["G2"], deps)
    app_metrics = _app_metrics(scenario, status["G3"])
    _apply_g4(scenario, status["G4"], deps, app_metrics)
    _apply_g5(scenario, status["G5"], deps)
    _apply_g9(scenario, status["G9"], deps)
    governance = _governance(scenario, status["G10"])
    if governance.replica_cap is not None:
        for dep in deps.values():
            sc = dep.scaling
            if not sc.frozen:
                sc.max_replicas = max(sc.min_replicas, min(sc.max_replicas, governance.replica_cap))
                sc.initial_replicas = min(sc.initial_replicas, sc.max_replicas)
    plan = SimulationPlan(
        deployments=deps,
        telemetry=TelemetryPlan(
            app_metrics=app_metrics,
            error_metrics=status["G7"] is not GapStatus.ACTIVE,
            masked_error_metrics=status["G7"] is GapStatus.REMEDIATED,
        ),
        error_handling=_error_handling(scenario, status["G6"]),
        call_graph=_call_graph(scenario, status["G8"]),
        governance=governance,
        status=status,
    )
    _logger.debug(f"Assembled {scenario.name}: " + ", ".join(f"{g}={s.value}" for g, s in status.items()))
    return plan


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GapReportRow:
    gap: GapDefinition
    status: GapStatus


@dataclass(frozen=True)
class GapReport:
    scenario: str
    rows: tuple[GapReportRow, ...]

    def matrix_row(self) -> tuple[bool, ...]:
        """This scenario in the benchmark matrix columns: an issue shows when any of its gaps is active."""
        active = {r.gap.id for r in self.rows if r.status is GapStatus.ACTIVE}
        return tuple(any(g in active for g in gaps_in_category(c)) for c in MATRIX_COLUMNS)

    def records(self) -> list[dict[str, str]]:
        return [
            {
                "gap": r.gap.id,
                "name": r.gap.name,
                "challenge": r.gap.challenge,
                "category": r.gap.category,
                "phase": r.gap.phase,
                "status": r.status.value,
            }
            for r in self.rows
        ]


def gap_report(scenario: ScenarioConfig) -> GapReport:
    """Per-gap status, ordered by challenge then gap id."""
    try:
        status = resolve(scenario)
    except InconsistentConfig:
        status = {g: GapStatus.NOT_REPRESENTABLE if not representable(scenario, g) else GapStatus.INACTIVE
                  for g in GAP_IDS}
    challenge_order = {"Scalability": 0, "Observability": 1, "Security": 2}
    rows = sorted(
        (GapReportRow(GAP_CATALOG[g], status[g]) for g in GAP_IDS),
        key=lambda r: (challenge_order[r.gap.challenge], GAP_IDS.index(r.gap.id)),
    )
    return GapReport(scenario.name, tuple(rows))


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def format_gap_report(report: GapReport) -> str:
    gap_table = format_table(
        ["Gap", "Name", "Challenge", "Category", "Phase", "Status"],
        [[r["gap"], r["name"], r["challenge"], r["category"], r["phase"], r["status"]]
         for r in report.records()],
    )
    matrix = [[name, *(_mark(v) for v in row)] for name, row in BENCHMARK_MATRIX.items()]
    matrix.append([f"{report.scenario} (this run)", *(_mark(v) for v in report.matrix_row())])
    matrix_table = format_table(["Benchmark", *MATRIX_COLUMNS], matrix)
    return f"{gap_table}\n\nIssues observed per benchmark:\n{matrix_table}"
