"""The microservice application: endpoints, call patterns, request execution.

Requests are exact-time events inside a step.  Every pod runs a
processor-sharing queue at its serving entitlement; when a hop finishes its
local CPU work it issues its downstream calls (fan-out from the owner, or one
link of a chain forwarded to the callee) and waits for them without using CPU.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

from gapsim.cluster import Cluster, Pod
from gapsim.config import DEMAND_JITTER, MAX_QUEUE, REQUEST_TIMEOUT_MS
from gapsim.rng import SeededRng

if TYPE_CHECKING:
    from gapsim.telemetry import Telemetry

_logger = logging.getLogger("gapsim")


class CallPattern(Enum):
    CHAINED = "chained"
    FAN_OUT = "fan_out"


class ErrorMode(Enum):
    PROPAGATE = "propagate"
    MASK = "mask"


class ErrorKind(Enum):
    TIMEOUT = "timeout"
    DEPENDENCY_UNAVAILABLE = "dependency_unavailable"
    RETRY_FAILURE = "retry_failure"  # reserved, never produced
    DOWNSTREAM_ERROR = "downstream_error"


class Outcome(Enum):
    SUCCESS = "success"
    MASKED_SUCCESS = "masked_success"
    ERROR = "error"


class Admission(Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"  # queue full


@dataclass(frozen=True)
class EndpointSpec:
    name: str
    cpu_demand_ms: float
    downstream: tuple[tuple[str, str], ...] = ()
    call_pattern: CallPattern = CallPattern.FAN_OUT
    timeout_ms: int = REQUEST_TIMEOUT_MS
    max_queue: int = MAX_QUEUE
    error_mode: ErrorMode = ErrorMode.PROPAGATE

    def __post_init__(self) -> None:
        if self.cpu_demand_ms <= 0:
            raise ValueError(f"endpoint {self.name}: cpu_demand_ms must be > 0")
        if self.max_queue < 1:
            raise ValueError(f"endpoint {self.name}: max_queue must be >= 1")


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    endpoints: tuple[EndpointSpec, ...]
    deployment_ref: str = ""

    def endpoint(self, name: str) -> EndpointSpec:
        for ep in self.endpoints:
            if ep.name == name:
                return ep
        raise KeyError(f"{self.name} has no endpoint {name!r}")


class ServiceTopology:
    """Services keyed by name plus the single entry endpoint the workload targets."""

    def __init__(self, services: list[ServiceSpec], entry: tuple[str, str]):
        names = [s.name for s in services]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate service names in {names}")
        self.services = {s.name: s for s in services}
        self.entry = entry
        for svc in services:
            for ep in svc.endpoints:
                for callee, callee_ep in ep.downstream:
                    self.endpoint(callee, callee_ep)
        self.endpoint(*entry)

    def endpoint(self, service: str, name: str) -> EndpointSpec:
        if service not in self.services:
            raise KeyError(f"unknown service {service!r}")
        return self.services[service].endpoint(name)

    def static_edges(self, pattern_override: CallPattern | None = None) -> list[tuple[str, str]]:
        """Caller -> callee service edges implied by the declared call patterns."""
        edges: list[tuple[str, str]] = []

        def walk(service: str, ep_name: str, inherited: tuple[tuple[str, str], ...]) -> None:
            ep = self.endpoint(service, ep_name)
            for callee, callee_ep, rest in _child_calls(ep, inherited, pattern_override):
                if (service, callee) not in edges:
                    edges.append((service, callee))
                walk(callee, callee_ep, rest)

        walk(*self.entry, ())
        return edges

    def call_tree(self, pattern_override: CallPattern | None = None) -> CallTree:
        """Nested (service, children) tree of the entry request; children run in parallel."""

        def build(service: str, ep_name: str, inherited: tuple[tuple[str, str], ...]) -> CallTree:
            ep = self.endpoint(service, ep_name)
            return CallTree(service, tuple(
                build(callee, callee_ep, rest)
                for callee, callee_ep, rest in _child_calls(ep, inherited, pattern_override)
            ))

        return build(*self.entry, ())


@dataclass(frozen=True)
class CallTree:
    service: str
    children: tuple[CallTree, ...] = ()

    def services(self) -> list[str]:
        out = [self.service]
        for c in self.children:
            out.extend(s for s in c.services() if s not in out)
        return out


def _child_calls(ep: EndpointSpec, inherited: tuple[tuple[str, str], ...],
                 pattern_override: CallPattern | None):
    """(callee, endpoint, chain remainder) for every call a finished hop issues."""
    pattern = pattern_override or ep.call_pattern
    calls: list[tuple[str, str, tuple[tuple[str, str], ...]]] = []
    if ep.downstream:
        if pattern is CallPattern.FAN_OUT:
            calls.extend((svc, name, ()) for svc, name in ep.downstream)
        else:
            head, *rest = ep.downstream
            calls.append((head[0], head[1], tuple(rest)))
    if inherited:
        head, *rest = inherited
        calls.append((head[0], head[1], tuple(rest)))
    return calls


# ---------------------------------------------------------------------------
# Requests and spans
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Span:
    request: RequestRecord
    service: str
    endpoint: EndpointSpec
    start_ms: float
    parent: Span | None = None
    chain_rest: tuple[tuple[str, str], ...] = ()
    end_ms: float | None = None
    outcome: Outcome | None = None
    error: ErrorKind | None = None
    pod: Pod | None = None
    rejected_by: Pod | None = None
    local_done: bool = False
    finished: bool = False
    cancelled: bool = False
    pending: int = 0
    children: list[Span] = field(default_factory=list)

    @property
    def latency_ms(self) -> float | None:
        return None if self.end_ms is None else self.end_ms - self.start_ms


@dataclass(eq=False)
class RequestRecord:
    id: int
    arrival_ms: float
    completion_ms: float | None = None
    outcome: Outcome | None = None
    error: ErrorKind | None = None
    spans: list[Span] = field(default_factory=list)

    @property
    def latency_ms(self) -> float | None:
        return None if self.completion_ms is None else self.completion_ms - self.arrival_ms


# ---------------------------------------------------------------------------
# Processor sharing
# ---------------------------------------------------------------------------

class PodQueue:
    """Egalitarian processor sharing in virtual time.

    With k jobs sharing rate r (mcores), virtual time advances at
    r / (k * 1000) CPU-ms per ms; a job finishes when virtual time reaches
    its start plus its demand.
    """

    def __init__(self) -> None:
        self.rate_mcores = 0.0
        self.vtime = 0.0
        self.t_last = 0.0
        self.busy_cpu_ms = 0.0
        self.version = 0
        self._heap: list[tuple[float, int, Span]] = []
        self._active: set[Span] = set()
        self._seq = itertools.count()
        self.spans: set[Span] = set()  # assigned and unfinished, including waiting hops

    @property
    def in_flight(self) -> int:
        return len(self.spans)

    @property
    def computing(self) -> int:
        return len(self._active)

    def advance(self, t: float) -> None:
        dt = t - self.t_last
        if dt > 0 and self._active and self.rate_mcores > 0:
            self.vtime += dt * self.rate_mcores / (len(self._active) * 1000.0)
            self.busy_cpu_ms += dt * self.rate_mcores / 1000.0
        self.t_last = max(self.t_last, t)

    def add(self, span: Span, work_cpu_ms: float, t: float) -> None:
        self.advance(t)
        heapq.heappush(self._heap, (self.vtime + work_cpu_ms, next(self._seq), span))
        self._active.add(span)

    def remove(self, span: Span, t: float) -> None:
        self.advance(t)
        self._active.discard(span)

    def _clean(self) -> None:
        while self._heap and self._heap[0][2] not in self._active:
            heapq.heappop(self._heap)

    def next_completion(self, t: float) -> float | None:
        self._clean()
        if not self._heap or self.rate_mcores <= 0:
            return None
        remaining = self._heap[0][0] - self.vtime
        return t + max(0.0, remaining) * len(self._active) * 1000.0 / self.rate_mcores

    def pop_completed(self, t: float) -> list[Span]:
        """Jobs whose work is done at t; the head job is always included."""
        self.advance(t)
        self._clean()
        done: list[Span] = []
        if not self._heap:
            return done
        head_v, _, span = heapq.heappop(self._heap)
        done.append(span)
        # The head may sit a rounding error ahead of vtime.
        self.vtime = max(self.vtime, head_v)
        tol = 1e-9 * max(1.0, abs(self.vtime))
        while True:
            self._clean()
            if not self._heap or self._heap[0][0] > self.vtime + tol:
                break
            done.append(heapq.heappop(self._heap)[2])
        for s in done:
            self._active.discard(s)
        return done

    def reset(self, t: float) -> None:
        """Drop all work (the process died); stale completion events are invalidated."""
        self._heap.clear()
        self._active.clear()
        self.spans.clear()
        self.vtime = 0.0
        self.t_last = t
        self.version += 1


def admit(pod: Pod, endpoint: EndpointSpec) -> Admission:
    if pod.in_flight < endpoint.max_queue:
        return Admission.ACCEPTED
    return Admission.REJECTED


def route(pods: list[Pod]) -> Pod | None:
    """Least in-flight pod; ties go to the lowest pod id."""
    if not pods:
        return None
    return min(pods, key=lambda p: (p.in_flight, p.id))


# ---------------------------------------------------------------------------
# App model
# ---------------------------------------------------------------------------

_ARRIVAL, _DONE, _DEADLINE = 0, 1, 2


@dataclass
class StressWindow:
    service: str
    demand_multiplier: float
    start_ms: float
    end_ms: float | None = None

    def active(self, t: float) -> bool:
        return t >= self.start_ms and (self.end_ms is None or t < self.end_ms)


class AppModel:
    """Runs requests through the topology on the cluster's pods."""

    def __init__(self, topology: ServiceTopology, cluster: Cluster,
                 telemetry: Telemetry | None = None,
                 pattern_override: CallPattern | None = None,
                 stress: list[StressWindow] | None = None,
                 jitter: SeededRng | None = None):
        self.topology = topology
        self.cluster = cluster
        self.telemetry = telemetry
        self.pattern_override = pattern_override
        self.stress = stress or []
        self._jitter = jitter
        self._events: list[tuple[float, int, int, object, int]] = []
        self._seq = itertools.count()
        self._request_ids = itertools.count()
        self._t1 = 0.0
        self.on_request_finished: list[Callable[[RequestRecord], None]] = []
        cluster.on_pod_created = self._attach
        cluster.on_pod_stopped = self.drop_pod
        for pod in cluster.all_pods():
            self._attach(pod)

    def _attach(self, pod: Pod) -> None:
        if pod.queue is None:
            pod.queue = PodQueue()

    def _push(self, t: float, kind: int, obj: object, version: int = 0) -> None:
        heapq.heappush(self._events, (t, next(self._seq), kind, obj, version))

    # -- step driving ------------------------------------------------------

    def inject(self, arrival_ms: float) -> RequestRecord:
        req = RequestRecord(id=next(self._request_ids), arrival_ms=arrival_ms)
        self._push(arrival_ms, _ARRIVAL, req)
        return req

    def begin_step(self, t0: float, t1: float) -> None:
        """Bind each pod's queue to its serving entitlement for [t0, t1)."""
        self._t1 = t1
        for pod in self.cluster.all_pods():
            q = pod.queue
            assert q is not None
            q.advance(t0)
            q.t_last = t0
            q.busy_cpu_ms = 0.0
            q.rate_mcores = self.cluster.serving_rate(pod)
            self._schedule(pod, t0)

    def run_until(self, t1: float) -> None:
        while self._events and self._events[0][0] <= t1:
            t, _, kind, obj, version = heapq.heappop(self._events)
            if kind == _ARRIVAL:
                assert isinstance(obj, RequestRecord)
                svc, ep = self.topology.entry
                self._call(obj, None, svc, ep, (), t)
            elif kind == _DONE:
                assert isinstance(obj, Pod)
                q = obj.queue
                if q is None or version != q.version or obj not in obj.node.pods:
                    continue
                for span in q.pop_completed(t):
                    self._local_done(span, t)
                self._schedule(obj, t)
            elif kind == _DEADLINE:
                assert isinstance(obj, Span)
                if not obj.finished:
                    self._fail(obj, ErrorKind.TIMEOUT, t)

    def end_step(self, t1: float) -> dict[Pod, float]:
        """CPU-ms consumed by request work on each pod during the step."""
        used: dict[Pod, float] = {}
        for pod in self.cluster.all_pods():
            q = pod.queue
            assert q is not None
            q.advance(t1)
            used[pod] = q.busy_cpu_ms
        return used

    def step(self, t0: float, t1: float) -> dict[Pod, float]:
        self.begin_step(t0, t1)
        self.run_until(t1)
        return self.end_step(t1)

    def _schedule(self, pod: Pod, t: float) -> None:
        q = pod.queue
        assert q is not None
        q.version += 1
        nxt = q.next_completion(t)
        if nxt is not None and nxt <= self._t1:
            self._push(max(nxt, t), _DONE, pod, q.version)

    # -- request mechanics -------------------------------------------------

    def _demand(self, service: str, ep: EndpointSpec, t: float) -> float:
        demand = ep.cpu_demand_ms
        for s in self.stress:
            if s.service == service and s.active(t):
                demand *= s.demand_multiplier
        if self._jitter is not None:
            demand *= 1.0 + DEMAND_JITTER * (2.0 * self._jitter.next_uniform() - 1.0)
        return demand

    def _call(self, request: RequestRecord, parent: Span | None, service: str,
              endpoint: str, chain_rest: tuple[tuple[str, str], ...], t: float) -> Span:
        ep = self.topology.endpoint(service, endpoint)
        span = Span(request=request, service=service, endpoint=ep, start_ms=t,
                    parent=parent, chain_rest=chain_rest)
        request.spans.append(span)
        if parent is not None:
            parent.children.append(span)
            parent.pending += 1
        if self.telemetry is not None:
            self.telemetry.record_span_start(span)

        pod = route(self.cluster.routable_pods(service))
        if pod is not None and admit(pod, ep) is Admission.REJECTED:
            span.rejected_by = pod
            pod = None
        if pod is None:
            self._fail(span, ErrorKind.DEPENDENCY_UNAVAILABLE, t)
            return span
        q = pod.queue
        assert q is not None
        span.pod = pod
        q.spans.add(span)
        q.add(span, self._demand(service, ep, t), t)
        self._schedule(pod, t)
        self._push(t + ep.timeout_ms, _DEADLINE, span)
        return span

    def _local_done(self, span: Span, t: float) -> None:
        if span.finished:
            return
        span.local_done = True
        calls = _child_calls(span.endpoint, span.chain_rest, self.pattern_override)
        if not calls:
            self._complete(span, Outcome.SUCCESS, t)
            return
        for callee, callee_ep, rest in calls:
            if span.finished:
                break
            self._call(span.request, span, callee, callee_ep, rest, t)

    def _release(self, span: Span, t: float) -> None:
        span.finished = True
        span.end_ms = t
        if span.pod is not None and span.pod.queue is not None:
            q = span.pod.queue
            if not span.local_done:
                q.remove(span, t)
                self._schedule(span.pod, t)
            q.spans.discard(span)

    def _cancel(self, span: Span, t: float) -> None:
        for child in span.children:
            if not child.finished:
                child.cancelled = True
                self._release(child, t)
                self._cancel(child, t)
                if self.telemetry is not None:
                    self.telemetry.record_span_end(child)

    def _complete(self, span: Span, outcome: Outcome, t: float) -> None:
        self._release(span, t)
        span.outcome = outcome
        self._cancel(span, t)
        if self.telemetry is not None:
            self.telemetry.record_span_end(span)
        if span.parent is not None:
            self._child_finished(span, t)
        else:
            self._finish_request(span.request, outcome, None, t)

    def _fail(self, span: Span, kind: ErrorKind, t: float) -> None:
        self._release(span, t)
        span.outcome = Outcome.ERROR
        span.error = kind
        self._cancel(span, t)
        if self.telemetry is not None:
            self.telemetry.record_span_end(span)
        if span.parent is not None:
            self._child_finished(span, t)
        else:
            self._finish_request(span.request, Outcome.ERROR, kind, t)

    def _child_finished(self, child: Span, t: float) -> None:
        parent = child.parent
        assert parent is not None
        if parent.finished:
            return
        if child.outcome is Outcome.ERROR:
            self.handle_downstream_failure(parent, child, t)
            return
        parent.pending -= 1
        if parent.pending == 0 and parent.local_done:
            masked = any(c.outcome is Outcome.MASKED_SUCCESS for c in parent.children)
            self._complete(parent, Outcome.MASKED_SUCCESS if masked else Outcome.SUCCESS, t)

    def error_mode(self, span: Span) -> ErrorMode:
        return span.endpoint.error_mode

    def handle_downstream_failure(self, caller: Span, failed: Span, t: float) -> Outcome:
        """Apply the caller endpoint's error mode to a failed downstream span."""
        if self.error_mode(caller) is ErrorMode.MASK:
            if self.telemetry is not None:
                self.telemetry.record_masked_error(caller, failed)
            self._complete(caller, Outcome.MASKED_SUCCESS, t)
            return Outcome.MASKED_SUCCESS
        self._fail(caller, ErrorKind.DOWNSTREAM_ERROR, t)
        return Outcome.ERROR

    def _finish_request(self, request: RequestRecord, outcome: Outcome,
                        kind: ErrorKind | None, t: float) -> None:
        request.completion_ms = t
        request.outcome = outcome
        request.error = kind
        if self.telemetry is not None:
            self.telemetry.record_outcome(request)
        for cb in self.on_request_finished:
            cb(request)

    def drop_pod(self, pod: Pod, t: float) -> None:
        """Fail every span still held by a pod that restarts or is removed."""
        q = pod.queue
        if q is None:
            return
        for span in sorted(q.spans, key=lambda s: (s.start_ms, s.request.id)):
            if not span.finished:
                self._fail(span, ErrorKind.DEPENDENCY_UNAVAILABLE, t)
        q.reset(t)


def mm1_mean_sojourn_ms(demand_ms: float, rho: float) -> float:
    """Mean time in system for M/M/1-PS at unit rate."""
    if rho >= 1.0:
        return math.inf
    return demand_ms / (1.0 - rho)
