"""Scenario documents: pydantic schema, preset inheritance, loading and validation."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from gapsim.config import (
    DEFAULT_NODE_CAPACITY_MCORES,
    LATENCY_WINDOW_MS,
    MAX_QUEUE,
    MAX_REPLICAS,
    REQUEST_TIMEOUT_MS,
    SLO_MS,
    STEP_MS,
    SYNC_PERIOD_MS,
    UTILIZATION_WINDOW_MS,
)

_logger = logging.getLogger("gapsim")

PRESETS_DIR = Path(__file__).parent / "presets"
BUNDLED_TRACE_NAME = "bundled"


class ScenarioError(ValueError):
    """A scenario document failed to load or validate."""


class InconsistentConfig(ScenarioError):
    """A gap/remediation combination has no meaning for the scenario."""

    def __init__(self, first: str, second: str, reason: str):
        super().__init__(f"{first} with {second}: {reason}")
        self.pair = (first, second)


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Cluster and topology
# ---------------------------------------------------------------------------

class NodeModel(_Model):
    name: str | None = None
    capacity_mcores: int = Field(DEFAULT_NODE_CAPACITY_MCORES, gt=0)


class QuotaModel(_Model):
    namespace: str = "default"
    cpu_request_cap_mcores: int | None = Field(None, ge=0)
    memory_cap_mb: int | None = Field(None, ge=0)


class ClusterModel(_Model):
    nodes: list[NodeModel] = Field(default_factory=lambda: [NodeModel(), NodeModel()], min_length=1)
    namespace_quotas: list[QuotaModel] = Field(default_factory=list)


class CallModel(_Model):
    service: str
    endpoint: str


class EndpointModel(_Model):
    name: str
    cpu_demand_ms: float = Field(gt=0)
    downstream: list[CallModel] = Field(default_factory=list)
    call_pattern: Literal["chained", "fan_out"] = "fan_out"
    timeout_ms: int = Field(REQUEST_TIMEOUT_MS, gt=0)
    max_queue: int = Field(MAX_QUEUE, ge=1)
    error_mode: Literal["propagate", "mask"] = "propagate"


class ServiceModel(_Model):
    name: str
    namespace: str = "default"
    endpoints: list[EndpointModel] = Field(min_length=1)


class TopologyModel(_Model):
    entry: CallModel
    services: list[ServiceModel] = Field(min_length=1)

    @model_validator(mode="after")
    def _references(self) -> TopologyModel:
        names = [s.name for s in self.services]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate service names: {names}")
        eps = {(s.name, e.name) for s in self.services for e in s.endpoints}
        if (self.entry.service, self.entry.endpoint) not in eps:
            raise ValueError(f"entry {self.entry.service}/{self.entry.endpoint} is not a declared endpoint")
        for s in self.services:
            for e in s.endpoints:
                for c in e.downstream:
                    if (c.service, c.endpoint) not in eps:
                        raise ValueError(f"{s.name}/{e.name} calls unknown {c.service}/{c.endpoint}")
        return self


# ---------------------------------------------------------------------------
# Deployments
# ---------------------------------------------------------------------------

class ResourcesModel(_Model):
    request_mcores: int = Field(ge=0)
    limit_mcores: int | None = Field(None, ge=0)
    memory_mb: int = Field(256, ge=0)

    @model_validator(mode="after")
    def _limit_covers_request(self) -> ResourcesModel:
        if self.limit_mcores is not None and self.limit_mcores < self.request_mcores:
            raise ValueError("limit_mcores below request_mcores")
        return self


class ProbeModel(_Model):
    initial_delay_ms: int = Field(gt=0)
    period_ms: int = Field(gt=0)
    timeout_ms: int = Field(1000, gt=0)
    failure_threshold: int = Field(3, ge=1)
    success_threshold: int = Field(1, ge=1)

    @property
    def deadline_ms(self) -> int:
        return self.initial_delay_ms + self.period_ms * self.failure_threshold


class ProbesModel(_Model):
    readiness: ProbeModel | None = None
    liveness: ProbeModel | None = None


class BootModel(_Model):
    init_duration_ms: int = Field(0, ge=0)
    boot_duration_ms: int = Field(0, ge=0)
    boot_cpu_demand_mcores: int = Field(0, ge=0)
    init_isolated: bool = False
    boot_burst_limit_mcores: int | None = Field(None, gt=0)
    startup_counted: bool = False


class DeploymentModel(_Model):
    service: str
    min_replicas: int = Field(1, ge=0)
    max_replicas: int = Field(MAX_REPLICAS, ge=0)
    initial_replicas: int | None = Field(None, ge=0)
    scale_rate_limit: int | None = Field(None, ge=1)
    resources: ResourcesModel
    probes: ProbesModel = Field(default_factory=ProbesModel)
    boot: BootModel = Field(default_factory=BootModel)
    node: str | None = None
    frozen: bool = False

    @model_validator(mode="after")
    def _bounds(self) -> DeploymentModel:
        if self.min_replicas > self.max_replicas:
            raise ValueError(f"min>max ({self.min_replicas} > {self.max_replicas})")
        return self

    @property
    def start_replicas(self) -> int:
        n = self.min_replicas if self.initial_replicas is None else self.initial_replicas
        return max(self.min_replicas, min(self.max_replicas, n))


# ---------------------------------------------------------------------------
# Workload
# ---------------------------------------------------------------------------

class GeneratorModel(_Model):
    kind: Literal["constant", "step", "sinusoid", "flash_crowd"]
    rate_rps: float = Field(ge=0)
    step_at_ms: float = Field(0.0, ge=0)
    step_rate_rps: float = Field(0.0, ge=0)
    amplitude_rps: float = Field(0.0, ge=0)
    period_ms: float = Field(600_000.0, gt=0)
    burst_start_ms: float = Field(0.0, ge=0)
    burst_end_ms: float = Field(0.0, ge=0)
    burst_multiplier: float = Field(1.0, ge=0)


class WorkloadModel(_Model):
    mode: Literal["open", "closed"] = "open"
    trace: str | None = None
    generator: GeneratorModel | None = None
    scale_factor: float = Field(1.0, ge=0)
    loop: bool = True
    users: int = Field(0, ge=0)
    think_time_ms: float = Field(1000.0, ge=0)
    jitter: bool = False

    @model_validator(mode="after")
    def _one_source(self) -> WorkloadModel:
        if self.mode == "open" and (self.trace is None) == (self.generator is None):
            raise ValueError("open-loop workload needs exactly one of trace or generator")
        return self


class StressModel(_Model):
    service: str
    demand_multiplier: float = Field(gt=0)
    start_ms: int = Field(0, ge=0)
    end_ms: int | None = Field(None, ge=0)


class AutoscalerModel(_Model):
    name: str = "khpa"
    params: dict[str, Any] = Field(default_factory=dict)


class TelemetryModel(_Model):
    utilization_window_ms: int = Field(UTILIZATION_WINDOW_MS, gt=0)
    latency_window_ms: int = Field(LATENCY_WINDOW_MS, gt=0)


class ReportModel(_Model):
    timeseries_every_ms: int | None = Field(None, gt=0)
    pod_series: bool = False


# ---------------------------------------------------------------------------
# Gaps and remediations
# ---------------------------------------------------------------------------

class _Toggle(_Model):
    services: list[str] | None = None  # None = every service the gap can touch


class G1Gap(_Toggle):
    active: bool = False
    boot_cpu_mcores: int | None = Field(None, gt=0)


class G2Gap(_Toggle):
    active: bool = False


class G3Gap(_Toggle):
    active: bool = False


class G4Gap(_Toggle):
    active: bool = False


class G5Gap(_Toggle):
    active: bool = False
    liveness: ProbeModel = Field(default_factory=lambda: ProbeModel(
        initial_delay_ms=30_000, period_ms=10_000, timeout_ms=1000, failure_threshold=3))
    readiness: ProbeModel | None = None


class G6Gap(_Model):
    active: bool = False
    callers: list[CallModel] | None = None  # None = the entry endpoint


class G7Gap(_Model):
    active: bool = False


class G8Gap(_Model):
    active: bool = False


class G9Gap(_Model):
    active: bool = False


class G10Gap(_Model):
    active: bool = False


class GapConfig(_Model):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    g1: G1Gap = Field(default_factory=G1Gap, alias="G1")
    g2: G2Gap = Field(default_factory=G2Gap, alias="G2")
    g3: G3Gap = Field(default_factory=G3Gap, alias="G3")
    g4: G4Gap = Field(default_factory=G4Gap, alias="G4")
    g5: G5Gap = Field(default_factory=G5Gap, alias="G5")
    g6: G6Gap = Field(default_factory=G6Gap, alias="G6")
    g7: G7Gap = Field(default_factory=G7Gap, alias="G7")
    g8: G8Gap = Field(default_factory=G8Gap, alias="G8")
    g9: G9Gap = Field(default_factory=G9Gap, alias="G9")
    g10: G10Gap = Field(default_factory=G10Gap, alias="G10")


class G1Fix(_Toggle):
    applied: bool = False
    strategy: Literal["init_container", "boot_burst"] = "init_container"
    boot_burst_limit_mcores: int = Field(1000, gt=0)


class G2Fix(_Toggle):
    applied: bool = False
    replica_cap: int | None = Field(5, ge=1)
    rate_limit: int | None = Field(2, ge=1)


class G3Fix(_Toggle):
    applied: bool = False


def _sound_readiness() -> ProbeModel:
    return ProbeModel(initial_delay_ms=10_000, period_ms=5_000, timeout_ms=1000, failure_threshold=3)


def _sound_liveness() -> ProbeModel:
    return ProbeModel(initial_delay_ms=360_000, period_ms=10_000, timeout_ms=1000, failure_threshold=3)


class G4Fix(_Toggle):
    applied: bool = False
    readiness: ProbeModel = Field(default_factory=_sound_readiness)
    liveness: ProbeModel | None = Field(default_factory=_sound_liveness)


class G5Fix(_Toggle):
    applied: bool = False
    readiness: ProbeModel = Field(default_factory=_sound_readiness)
    liveness: ProbeModel | None = Field(default_factory=_sound_liveness)


class G6Fix(_Model):
    applied: bool = False
    strategy: Literal["propagate", "log_watch"] = "propagate"
    callers: list[CallModel] | None = None
    watch_services: list[str] | None = None  # None = the entry's direct callees
    failure_threshold: int = Field(50, ge=1)
    window_ms: int = Field(60_000, gt=0)


class G7Fix(_Model):
    applied: bool = False


class G8Fix(_Model):
    applied: bool = False
    strategy: Literal["hardcoded_graph", "chained", "mesh"] = "hardcoded_graph"


class G9Fix(_Model):
    applied: bool = False


class G10Fix(_Model):
    applied: bool = False
    cpu_request_cap_mcores: int | None = Field(16_000, ge=0)
    memory_cap_mb: int | None = Field(None, ge=0)
    replica_cap: int | None = Field(None, ge=1)
    namespaces: list[str] | None = None


class RemediationSet(_Model):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    g1: G1Fix = Field(default_factory=G1Fix, alias="G1")
    g2: G2Fix = Field(default_factory=G2Fix, alias="G2")
    g3: G3Fix = Field(default_factory=G3Fix, alias="G3")
    g4: G4Fix = Field(default_factory=G4Fix, alias="G4")
    g5: G5Fix = Field(default_factory=G5Fix, alias="G5")
    g6: G6Fix = Field(default_factory=G6Fix, alias="G6")
    g7: G7Fix = Field(default_factory=G7Fix, alias="G7")
    g8: G8Fix = Field(default_factory=G8Fix, alias="G8")
    g9: G9Fix = Field(default_factory=G9Fix, alias="G9")
    g10: G10Fix = Field(default_factory=G10Fix, alias="G10")


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

class ScenarioConfig(_Model):
    name: str
    description: str = ""
    duration_ms: int = Field(ge=0)
    step_ms: int = Field(STEP_MS, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    slo_ms: float = Field(SLO_MS, gt=0)
    sync_period_ms: int = Field(SYNC_PERIOD_MS, gt=0)
    warm_start: bool = False
    cluster: ClusterModel = Field(default_factory=ClusterModel)
    topology: TopologyModel
    deployments: list[DeploymentModel]
    workload: WorkloadModel
    gaps: GapConfig = Field(default_factory=GapConfig)
    remediations: RemediationSet = Field(default_factory=RemediationSet)
    autoscaler: AutoscalerModel = Field(default_factory=AutoscalerModel)
    stress: list[StressModel] = Field(default_factory=list)
    telemetry: TelemetryModel = Field(default_factory=TelemetryModel)
    report: ReportModel = Field(default_factory=ReportModel)
    base_dir: str | None = Field(None, exclude=True)

    @model_validator(mode="after")
    def _cross_references(self) -> ScenarioConfig:
        services = [s.name for s in self.topology.services]
        deps = [d.service for d in self.deployments]
        for svc in services:
            if deps.count(svc) != 1:
                raise ValueError(f"service {svc} needs exactly one deployment, found {deps.count(svc)}")
        for d in deps:
            if d not in services:
                raise ValueError(f"deployment for unknown service {d}")
        node_names = self.node_names()
        for d in self.deployments:
            if d.node is not None and d.node not in node_names:
                raise ValueError(f"deployment {d.service} pinned to unknown node {d.node}")
        for s in self.stress:
            if s.service not in services:
                raise ValueError(f"stress targets unknown service {s.service}")
        if self.step_ms and self.sync_period_ms % self.step_ms:
            raise ValueError("sync_period_ms must be a multiple of step_ms")
        from gapsim.autoscalers import VALID_POLICIES
        if self.autoscaler.name.lower() not in VALID_POLICIES:
            raise ValueError(f"unknown autoscaler {self.autoscaler.name!r}")
        return self

    def node_names(self) -> list[str]:
        return [n.name or f"node-{i}" for i, n in enumerate(self.cluster.nodes)]

    def deployment(self, service: str) -> DeploymentModel:
        for d in self.deployments:
            if d.service == service:
                return d
        raise KeyError(service)

    def service_names(self) -> list[str]:
        return [s.name for s in self.topology.services]

    def trace_path(self) -> Path | None:
        if self.workload.trace is None:
            return None
        if self.workload.trace == BUNDLED_TRACE_NAME:
            from gapsim.workload import BUNDLED_TRACE
            return BUNDLED_TRACE
        p = Path(self.workload.trace)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge dicts; lists and scalars in `override` replace `base`."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESETS_DIR.glob("*.json"))


def _resolve_document(path: Path, seen: tuple[Path, ...] = ()) -> dict[str, Any]:
    if path in seen:
        raise ScenarioError(f"circular 'extends' through {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    parent = doc.pop("extends", None)
    if parent is None:
        return doc
    parent_path = resolve_scenario_path(parent, base=path.parent)
    base = _resolve_document(parent_path, seen + (path,))
    merged = deep_merge(base, doc)
    # Parameters belong to one policy; a child naming another policy starts from none.
    child_policy = doc.get("autoscaler")
    parent_policy = base.get("autoscaler")
    if isinstance(child_policy, dict) and isinstance(parent_policy, dict) \
            and "name" in child_policy and child_policy["name"] != parent_policy.get("name"):
        merged["autoscaler"] = dict(child_policy, params=child_policy.get("params", {}))
    return merged


def resolve_scenario_path(ref: str | Path, base: Path | None = None) -> Path:
    """A file path, or the name of a bundled preset."""
    p = Path(ref)
    if p.suffix == ".json":
        if not p.is_absolute() and base is not None and not p.exists():
            p = base / p
        return p
    preset = PRESETS_DIR / f"{ref}.json"
    if preset.exists():
        return preset
    raise ScenarioError(f"no scenario file or preset named {ref!r} (presets: {', '.join(list_presets())})")


def _format_errors(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        out.append(f"{loc}: {e['msg']}")
    return out


def load_scenario(ref: str | Path) -> ScenarioConfig:
    """Load, merge presets and validate. Raises ScenarioError with field paths."""
    path = resolve_scenario_path(ref)
    doc = _resolve_document(path)
    doc["base_dir"] = str(path.parent)
    try:
        return ScenarioConfig.model_validate(doc)
    except ValidationError as e:
        raise ScenarioError(f"{path}:\n  " + "\n  ".join(_format_errors(e))) from None


def scenario_schema() -> dict[str, Any]:
    return ScenarioConfig.model_json_schema(by_alias=True)


def validate(ref: str | Path) -> tuple[list[str], list[str]]:
    """Full static validation. Returns (errors, warnings); never raises."""
    from gapsim.autoscalers import get_policy
    from gapsim.gaps import assemble

    try:
        scenario = load_scenario(ref)
    except ScenarioError as e:
        return [str(e)], []
    errors: list[str] = []
    warnings: list[str] = []
    trace = scenario.trace_path()
    if trace is not None and not trace.exists():
        errors.append(f"workload.trace: file not found: {trace}")
    try:
        get_policy(scenario.autoscaler.name, scenario.autoscaler.params, seed=scenario.seed)
    except ValueError as e:
        errors.append(f"autoscaler.params: {e}")
    try:
        plan = assemble(scenario)
    except ScenarioError as e:
        errors.append(str(e))
        return errors, warnings
    for svc, dep in plan.deployments.items():
        boot = dep.boot
        startup_ms = boot.init_duration_ms + boot.boot_duration_ms
        live = dep.probes.liveness if dep.probes else None
        if live is not None and startup_ms > 0 and live.deadline_ms < startup_ms:
            warnings.append(
                f"{svc}: liveness deadline {live.deadline_ms} ms < boot {startup_ms} ms, restart loop likely"
            )
        ready = dep.probes.readiness if dep.probes else None
        if ready is not None and ready.initial_delay_ms > scenario.duration_ms > 0:
            warnings.append(f"{svc}: readiness initial delay exceeds the run, pods never become Ready")
    return errors, warnings
