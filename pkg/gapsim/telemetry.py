"""Metric collection and queries.

Two latency views are kept: the observed one (what a production monitor would
record, subject to masking and to which services expose metrics) and the
simulator's ground truth.  Policies only ever read the observed view.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import defaultdict, deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import networkx as nx
import numpy as np

from gapsim.app import ErrorKind, Outcome, RequestRecord, Span
from gapsim.cluster import Cluster, Deployment, Pod, PodPhase
from gapsim.config import LATENCY_WINDOW_MS, SLO_MS, UTILIZATION_WINDOW_MS

_logger = logging.getLogger("gapsim")

ENTRY_SERIES = "e2e"


def p_quantile(values: Sequence[float] | np.ndarray, q: float) -> float | None:
    """Nearest-rank quantile: the ceil(q*n)-th smallest of n samples, None when empty."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must be in (0, 1), got {q}")
    arr = np.asarray(values, dtype=float)
    n = arr.size
    if n == 0:
        return None
    k = max(1, math.ceil(Fraction(q).limit_denominator(10**9) * n))
    return float(np.partition(arr, k - 1)[k - 1])


class _Series:
    __slots__ = ("times", "values", "cumsum", "start")

    def __init__(self) -> None:
        self.times: list[float] = []
        self.values: list[float] = []
        self.cumsum: list[float] = [0.0]
        self.start = 0


class MetricWindow:
    """Time-ordered samples per named series, retained for `retention_ms`."""

    def __init__(self, retention_ms: int = max(UTILIZATION_WINDOW_MS, LATENCY_WINDOW_MS)):
        self.retention_ms = retention_ms
        self._series: dict[str, _Series] = {}

    def add(self, name: str, t_ms: float, value: float) -> None:
        s = self._series.get(name)
        if s is None:
            s = self._series[name] = _Series()
        if s.times and t_ms < s.times[-1]:
            raise ValueError(f"series {name}: sample at {t_ms} before {s.times[-1]}")
        s.times.append(t_ms)
        s.values.append(value)
        s.cumsum.append(s.cumsum[-1] + value)
        cutoff = t_ms - self.retention_ms
        while s.start < len(s.times) and s.times[s.start] <= cutoff:
            s.start += 1
        if s.start > 4096 and s.start > len(s.times) // 2:
            base = s.cumsum[s.start]
            s.times = s.times[s.start:]
            s.values = s.values[s.start:]
            s.cumsum = [c - base for c in s.cumsum[s.start:]]
            s.start = 0

    def _bounds(self, name: str, now_ms: float, window_ms: int) -> tuple[_Series | None, int, int]:
        s = self._series.get(name)
        if s is None:
            return None, 0, 0
        window_ms = min(window_ms, self.retention_ms)
        lo = bisect.bisect_right(s.times, now_ms - window_ms, lo=s.start)
        hi = bisect.bisect_right(s.times, now_ms, lo=lo)
        return s, lo, hi

    def values(self, name: str, now_ms: float, window_ms: int) -> list[float]:
        """Samples with now - window < t <= now."""
        s, lo, hi = self._bounds(name, now_ms, window_ms)
        return [] if s is None else s.values[lo:hi]

    def count(self, name: str, now_ms: float, window_ms: int) -> int:
        _, lo, hi = self._bounds(name, now_ms, window_ms)
        return hi - lo

    def total(self, name: str, now_ms: float, window_ms: int) -> float:
        s, lo, hi = self._bounds(name, now_ms, window_ms)
        return 0.0 if s is None else s.cumsum[hi] - s.cumsum[lo]

    def mean(self, name: str, now_ms: float, window_ms: int) -> float | None:
        s, lo, hi = self._bounds(name, now_ms, window_ms)
        if s is None or hi == lo:
            return None
        return (s.cumsum[hi] - s.cumsum[lo]) / (hi - lo)

    def quantile(self, name: str, q: float, now_ms: float, window_ms: int) -> float | None:
        return p_quantile(self.values(name, now_ms, window_ms), q)

    def drop(self, name: str) -> None:
        self._series.pop(name, None)

    def __contains__(self, name: str) -> bool:
        return name in self._series


@dataclass(frozen=True)
class EdgeStats:
    calls: int
    errors: int
    mean_latency_ms: float | None


@dataclass
class CallGraphObservation:
    edges: dict[tuple[str, str], EdgeStats] = field(default_factory=dict)
    enabled: bool = False

    def edge_set(self) -> set[tuple[str, str]]:
        return set(self.edges)

    def to_graph(self) -> nx.DiGraph:
        """Caller -> callee graph with call statistics as edge attributes."""
        g = nx.DiGraph()
        for (caller, callee), stats in sorted(self.edges.items()):
            g.add_edge(caller, callee, calls=stats.calls, errors=stats.errors,
                       latency=stats.mean_latency_ms)
        return g


@dataclass
class RunReport:
    requests: int = 0
    slo_violations: int = 0
    true_violations: int = 0
    masked_failures: int = 0
    failed_requests: int = 0
    cpu_core_minutes: float = 0.0  # integral of water-filled allocations, not usage
    core_minutes_by_service: dict[str, float] = field(default_factory=dict)
    observed_mean_ms: float | None = None
    observed_p90_ms: float | None = None
    true_mean_ms: float | None = None
    true_p90_ms: float | None = None
    max_replicas: dict[str, int] = field(default_factory=dict)
    restarts: dict[str, int] = field(default_factory=dict)
    quota_exceeded: int = 0
    errors_by_kind: dict[str, int] = field(default_factory=dict)
    steps: int = 0
    timeseries: list[dict[str, float | int | None]] = field(default_factory=list)
    decisions: list[dict[str, object]] = field(default_factory=list)
    pod_series: list[dict[str, object]] = field(default_factory=list)


def core_minutes(report: RunReport) -> float:
    return report.cpu_core_minutes


class Telemetry:
    """Per-run metric store fed by the app model and the step loop."""

    def __init__(self, services: Iterable[str], slo_ms: float = SLO_MS,
                 app_metrics: dict[str, bool] | None = None,
                 error_metrics: bool = False, masked_error_metrics: bool = False,
                 mesh: bool = False,
                 utilization_window_ms: int = UTILIZATION_WINDOW_MS,
                 latency_window_ms: int = LATENCY_WINDOW_MS):
        self.services = list(services)
        self.slo_ms = slo_ms
        self.app_metrics = {s: True for s in self.services} | (app_metrics or {})
        self.error_metrics = error_metrics
        # A masking caller reports its swallowed failure only when explicitly instrumented.
        self.masked_error_metrics = masked_error_metrics
        self.mesh = mesh
        self.utilization_window_ms = utilization_window_ms
        self.latency_window_ms = latency_window_ms
        self.window = MetricWindow(max(utilization_window_ms, latency_window_ms))
        self.report = RunReport(core_minutes_by_service={s: 0.0 for s in self.services},
                                max_replicas={s: 0 for s in self.services},
                                restarts={s: 0 for s in self.services})
        self.errors_by_kind: dict[tuple[str, ErrorKind], int] = defaultdict(int)
        self.status_errors: dict[str, int] = defaultdict(int)
        self._step_starts: dict[str, int] = defaultdict(int)
        self._step_errors: dict[str, int] = defaultdict(int)
        self._step_pod_failures: dict[str, int] = defaultdict(int)
        self._edges: deque[tuple[float, str, str, bool, float | None]] = deque()
        self._obs_latencies: list[float] = []
        self._true_latencies: list[float] = []

    # -- visibility --------------------------------------------------------

    def observable(self, service: str) -> bool:
        return self.app_metrics.get(service, False) or self.mesh

    # -- app model hooks ---------------------------------------------------

    def record_span_start(self, span: Span) -> None:
        self._step_starts[span.service] += 1

    def record_span_end(self, span: Span) -> None:
        t = span.end_ms
        assert t is not None
        if span.parent is not None:
            self._edges.append((t, span.parent.service, span.service,
                                span.outcome is Outcome.ERROR,
                                None if span.cancelled else span.latency_ms))
        if span.cancelled:
            return
        lat = span.latency_ms
        assert lat is not None
        self.window.add(f"true_lat/{span.service}", t, lat)
        if span.outcome is Outcome.ERROR:
            self._step_errors[span.service] += 1
            if self.observable(span.service):
                self.status_errors[span.service] += 1
            if self.error_metrics and span.error is not None:
                self.errors_by_kind[(span.service, span.error)] += 1
            pod = span.pod or span.rejected_by
            if pod is not None:
                self._step_pod_failures[pod.id] += 1
        elif self.observable(span.service):
            self.window.add(f"lat/{span.service}", t, lat)

    def record_masked_error(self, caller: Span, failed: Span) -> None:
        if self.masked_error_metrics:
            self.errors_by_kind[(caller.service, ErrorKind.DOWNSTREAM_ERROR)] += 1

    def record_outcome(self, request: RequestRecord) -> None:
        lat = request.latency_ms
        t = request.completion_ms
        assert lat is not None and t is not None
        rep = self.report
        rep.requests += 1
        self._true_latencies.append(lat)
        self.window.add(f"true_lat/{ENTRY_SERIES}", t, lat)
        if request.outcome is Outcome.ERROR:
            rep.slo_violations += 1
            rep.true_violations += 1
            rep.failed_requests += 1
            return
        self._obs_latencies.append(lat)
        self.window.add(f"lat/{ENTRY_SERIES}", t, lat)
        if lat > self.slo_ms:
            rep.slo_violations += 1
        if request.outcome is Outcome.MASKED_SUCCESS:
            rep.masked_failures += 1
            rep.true_violations += 1
        elif lat > self.slo_ms:
            rep.true_violations += 1

    # -- step sampling -----------------------------------------------------

    def sample(self, t_ms: float, dt_ms: float, cluster: Cluster) -> None:
        """Record one step's CPU, counts and failures."""
        rep = self.report
        for dep in cluster.deployments.values():
            view = {p.id for p in cluster.metrics_view(dep)}
            svc_alloc = 0.0
            for pod in dep.pods:
                svc_alloc += pod.cpu_entitled_mcores
                if pod.id in view:
                    self.window.add(f"cpu/{pod.id}", t_ms, pod.cpu_alloc_mcores)
            alloc_min = svc_alloc * dt_ms / 60_000_000.0
            rep.cpu_core_minutes += alloc_min
            rep.core_minutes_by_service[dep.service] = \
                rep.core_minutes_by_service.get(dep.service, 0.0) + alloc_min
            rep.max_replicas[dep.service] = max(rep.max_replicas.get(dep.service, 0), len(dep.live_pods))
            self.window.add(f"starts/{dep.service}", t_ms, self._step_starts.pop(dep.service, 0))
            self.window.add(f"errors/{dep.service}", t_ms, self._step_errors.pop(dep.service, 0))
            for pod in dep.pods:
                self.window.add(f"failures/{pod.id}", t_ms, self._step_pod_failures.pop(pod.id, 0))
        self._step_pod_failures.clear()
        rep.steps += 1

    def forget_pod(self, pod: Pod) -> None:
        self.window.drop(f"cpu/{pod.id}")
        self.window.drop(f"failures/{pod.id}")

    # -- queries -----------------------------------------------------------

    def utilization(self, deployment: Deployment, view: list[Pod], now_ms: float) -> float | None:
        """Mean over included pods of (mean in-window usage / request)."""
        if deployment.resources.request_mcores <= 0:
            return None
        ratios = []
        for pod in view:
            m = self.window.mean(f"cpu/{pod.id}", now_ms, self.utilization_window_ms)
            if m is not None:
                ratios.append(m / deployment.resources.request_mcores)
        return sum(ratios) / len(ratios) if ratios else None

    def p90(self, service: str, now_ms: float, observed: bool = True) -> float | None:
        prefix = "lat" if observed else "true_lat"
        if observed and service != ENTRY_SERIES and not self.observable(service):
            return None
        return self.window.quantile(f"{prefix}/{service}", 0.9, now_ms, self.latency_window_ms)

    def mean_latency(self, service: str, now_ms: float, observed: bool = True) -> float | None:
        prefix = "lat" if observed else "true_lat"
        if observed and service != ENTRY_SERIES and not self.observable(service):
            return None
        return self.window.mean(f"{prefix}/{service}", now_ms, self.latency_window_ms)

    def request_rate(self, service: str, now_ms: float) -> float:
        """Calls per second reaching the service over the latency window."""
        span = min(self.latency_window_ms, max(now_ms, 1.0))
        return self.window.total(f"starts/{service}", now_ms, self.latency_window_ms) * 1000.0 / span

    def error_rate(self, service: str, now_ms: float) -> float | None:
        if not self.observable(service):
            return None
        calls = self.window.total(f"starts/{service}", now_ms, self.latency_window_ms)
        if calls <= 0:
            return None
        return self.window.total(f"errors/{service}", now_ms, self.latency_window_ms) / calls

    def pod_failures(self, pod: Pod, now_ms: float, window_ms: int) -> int:
        return int(self.window.total(f"failures/{pod.id}", now_ms, window_ms))

    def observed_call_graph(self, now_ms: float) -> CallGraphObservation:
        """Edges crossed by at least one span in the window; empty without a mesh."""
        cutoff = now_ms - self.latency_window_ms
        while self._edges and self._edges[0][0] <= cutoff:
            self._edges.popleft()
        if not self.mesh:
            return CallGraphObservation(enabled=False)
        acc: dict[tuple[str, str], list[float]] = {}
        for t, caller, callee, err, lat in self._edges:
            if t > now_ms:
                continue
            a = acc.setdefault((caller, callee), [0, 0, 0.0, 0])
            a[0] += 1
            a[1] += int(err)
            if lat is not None:
                a[2] += lat
                a[3] += 1
        edges = {
            k: EdgeStats(int(a[0]), int(a[1]), a[2] / a[3] if a[3] else None)
            for k, a in acc.items()
        }
        return CallGraphObservation(edges=edges, enabled=True)

    # -- export ------------------------------------------------------------

    def timeseries_row(self, t_ms: float, cluster: Cluster) -> dict[str, float | int | None]:
        rep = self.report
        row: dict[str, float | int | None] = {"step_ms": int(t_ms)}
        for svc in self.services:
            dep = cluster.deployments[svc]
            view = cluster.metrics_view(dep)
            row[f"{svc}_ready"] = sum(1 for p in dep.pods if p.phase is PodPhase.READY)
            row[f"{svc}_desired"] = dep.replicas_desired
            row[f"{svc}_utilization"] = self.utilization(dep, view, t_ms)
            row[f"{svc}_cpu_mcores"] = sum(p.cpu_alloc_mcores for p in dep.pods)
            row[f"{svc}_p90_observed"] = self.p90(svc, t_ms, observed=True)
            row[f"{svc}_p90_true"] = self.p90(svc, t_ms, observed=False)
            row[f"{svc}_errors"] = self.status_errors.get(svc, 0)
        row["entry_p90_observed"] = self.p90(ENTRY_SERIES, t_ms, observed=True)
        row["entry_p90_true"] = self.p90(ENTRY_SERIES, t_ms, observed=False)
        row["cum_violations"] = rep.slo_violations
        row["cum_true_violations"] = rep.true_violations
        row["cum_masked_failures"] = rep.masked_failures
        row["cum_core_minutes"] = rep.cpu_core_minutes
        return row

    def pod_rows(self, t_ms: float, cluster: Cluster) -> list[dict[str, object]]:
        return [
            {
                "step_ms": int(t_ms),
                "pod": p.id,
                "service": p.deployment.service,
                "node": p.node.name,
                "phase": p.phase.value,
                "cpu_mcores": p.cpu_alloc_mcores,
                "restarts": p.restart_count,
            }
            for p in sorted(cluster.all_pods(), key=lambda p: p.id)
        ]

    def finalize(self, cluster: Cluster) -> RunReport:
        rep = self.report
        if self._obs_latencies:
            rep.observed_mean_ms = float(np.mean(self._obs_latencies))
            rep.observed_p90_ms = p_quantile(self._obs_latencies, 0.9)
        if self._true_latencies:
            rep.true_mean_ms = float(np.mean(self._true_latencies))
            rep.true_p90_ms = p_quantile(self._true_latencies, 0.9)
        rep.restarts = dict(cluster.restarts)
        rep.errors_by_kind = {
            f"{svc}:{kind.value}": n for (svc, kind), n in sorted(
                self.errors_by_kind.items(), key=lambda kv: (kv[0][0], kv[0][1].value))
        }
        return rep
