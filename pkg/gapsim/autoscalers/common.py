"""Shared policy types and the analytic latency estimator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

from gapsim.app import CallTree
from gapsim.telemetry import CallGraphObservation

_logger = logging.getLogger("gapsim")


def ceil_ratio(x: float) -> int:
    """ceil() that ignores float noise in the ninth decimal."""
    return math.ceil(round(x, 9))


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class ServiceView:
    service: str
    current: int
    ready_count: int
    min_replicas: int
    max_replicas: int
    utilization: float | None = None
    p90_ms: float | None = None
    mean_latency_ms: float | None = None
    request_rate_rps: float = 0.0
    error_rate: float | None = None
    capacity_mcores: float = 1000.0


@dataclass(frozen=True)
class PolicyInput:
    """Read-only snapshot handed to a policy at a sync point (observed series only)."""
    now_ms: float
    sync_period_ms: int
    slo_ms: float
    entry_service: str
    services: dict[str, ServiceView]
    entry_p90_ms: float | None = None
    entry_mean_ms: float | None = None
    entry_rate_rps: float = 0.0
    call_graph: CallGraphObservation = field(default_factory=CallGraphObservation)
    static_edges: tuple[tuple[str, str], ...] | None = None
    call_tree: CallTree | None = None
    ground_truth_demand_ms: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ScalingDecision:
    service: str
    target_replicas: int
    reason: str

    def __post_init__(self) -> None:
        if self.target_replicas < 0:
            raise ValueError(f"{self.service}: negative target {self.target_replicas}")


class Policy(Protocol):
    name: str

    def decide(self, inp: PolicyInput) -> list[ScalingDecision]: ...


# ---------------------------------------------------------------------------
# Estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ServiceEstimate:
    demand_ms: float
    capacity_mcores: float


@dataclass
class EstimatorModel:
    """Per-service demand and per-pod capacity for the M/M/1-PS estimate."""
    services: dict[str, ServiceEstimate] = field(default_factory=dict)
    slo_ms: float = 150.0

    def available(self, services: list[str]) -> bool:
        return all(s in self.services for s in services)


def estimate_p90(service: str, rate_rps: float, replicas: int, estimator: EstimatorModel) -> float:
    """P90 sojourn at one pod fed rate/replicas, as exponential with the M/M/1-PS mean."""
    if replicas < 1:
        raise ValueError(f"{service}: replicas must be >= 1")
    if rate_rps < 0:
        raise ValueError(f"{service}: negative rate")
    est = estimator.services[service]
    rho = rate_rps * est.demand_ms / (replicas * est.capacity_mcores)
    if rho >= 1.0:
        return 10.0 * estimator.slo_ms * rho
    mean = est.demand_ms * 1000.0 / est.capacity_mcores / (1.0 - rho)
    return mean * math.log(10.0)


def compose_p90(tree: CallTree, replicas: dict[str, int], rates: dict[str, float],
                estimator: EstimatorModel) -> float:
    """Own estimate plus the slowest child; chains nest, so their hops add up."""
    own = estimate_p90(tree.service, rates.get(tree.service, 0.0), replicas[tree.service], estimator)
    if not tree.children:
        return own
    return own + max(compose_p90(c, replicas, rates, estimator) for c in tree.children)


def fit_demand_ms(mean_own_ms: float, rate_rps: float, replicas: int, capacity_mcores: float) -> float:
    """Invert the M/M/1-PS mean for the per-request demand."""
    return mean_own_ms / (1000.0 / capacity_mcores + mean_own_ms * rate_rps / (replicas * capacity_mcores))


class OnlineDemandFit:
    """Fits demand from observed latency; a service without latency series stays unfitted."""

    def __init__(self) -> None:
        self._fits: dict[str, list[float]] = {}

    def update(self, inp: PolicyInput) -> None:
        if inp.call_tree is None:
            return
        self._visit(inp.call_tree, inp)

    def _visit(self, tree: CallTree, inp: PolicyInput) -> None:
        view = inp.services.get(tree.service)
        for c in tree.children:
            self._visit(c, inp)
        if view is None or view.mean_latency_ms is None or view.ready_count < 1:
            return
        waits = [inp.services[c.service].mean_latency_ms for c in tree.children]
        if any(w is None for w in waits):
            return
        own = view.mean_latency_ms - max((w for w in waits if w is not None), default=0.0)
        if own <= 0:
            return
        self._fits.setdefault(tree.service, []).append(
            fit_demand_ms(own, view.request_rate_rps, view.ready_count, view.capacity_mcores)
        )

    def model(self, inp: PolicyInput) -> EstimatorModel:
        services = {}
        for svc, fits in self._fits.items():
            if fits and svc in inp.services:
                ordered = sorted(fits)
                services[svc] = ServiceEstimate(ordered[len(ordered) // 2], inp.services[svc].capacity_mcores)
        return EstimatorModel(services, inp.slo_ms)


def ground_truth_model(inp: PolicyInput) -> EstimatorModel:
    return EstimatorModel(
        {s: ServiceEstimate(d, inp.services[s].capacity_mcores)
         for s, d in inp.ground_truth_demand_ms.items() if s in inp.services},
        inp.slo_ms,
    )
