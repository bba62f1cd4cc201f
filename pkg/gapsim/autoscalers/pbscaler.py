"""Bottleneck-aware scaling: rank services on the call graph, then search replica vectors.

Anomalies propagate from a slow callee back to its callers, so the anomaly
graph points callee -> caller.  The personalized random walk runs on its
reverse (the call graph itself) and accumulates rank at the root causes.
"""

from __future__ import annotations

import logging
import statistics
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import networkx as nx
import numpy as np

from gapsim.autoscalers.common import (
    EstimatorModel,
    OnlineDemandFit,
    PolicyInput,
    ScalingDecision,
    compose_p90,
    ground_truth_model,
)
from gapsim.autoscalers.khpa import KhpaPolicy
from gapsim.rng import SeededRng

_logger = logging.getLogger("gapsim")


def personalized_pagerank(graph: nx.DiGraph, personalization: dict[str, float],
                          damping: float = 0.85, iterations: int = 50) -> dict[str, float]:
    """Fixed-iteration power method; dangling mass restarts per the personalization."""
    nodes = sorted(graph.nodes)
    if not nodes:
        return {}
    a = nx.to_numpy_array(graph, nodelist=nodes, weight=None)
    out_deg = a.sum(axis=1)
    p = np.array([max(0.0, personalization.get(n, 1.0)) for n in nodes], dtype=float)
    p = p / p.sum() if p.sum() > 0 else np.full(len(nodes), 1.0 / len(nodes))
    trans = np.divide(a, out_deg[:, None], out=np.zeros_like(a), where=out_deg[:, None] > 0)
    dangling = out_deg == 0
    r = np.full(len(nodes), 1.0 / len(nodes))
    for _ in range(iterations):
        r = damping * (r @ trans + r[dangling].sum() * p) + (1.0 - damping) * p
    return {n: float(v) for n, v in zip(nodes, r)}


@dataclass(frozen=True)
class GaParams:
    population: int = 20
    generations: int = 30
    tournament: int = 3
    crossover: float = 0.9
    mutation: float = 0.1
    elitism: int = 2


def genetic_search(bounds: Sequence[tuple[int, int]], fitness: Callable[[tuple[int, ...]], float],
                   rng: SeededRng, params: GaParams = GaParams(),
                   seed_vector: tuple[int, ...] | None = None) -> tuple[int, ...]:
    """Minimize fitness over integer vectors within inclusive bounds.

    Ties in fitness go to the lexicographically smallest vector.
    """
    gen = rng.generator
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    cache: dict[tuple[int, ...], float] = {}

    def score(v: tuple[int, ...]) -> tuple[float, tuple[int, ...]]:
        if v not in cache:
            cache[v] = fitness(v)
        return cache[v], v

    def random_vector() -> tuple[int, ...]:
        return tuple(int(x) for x in gen.integers(lo, hi, endpoint=True))

    pop = [random_vector() for _ in range(params.population)]
    if seed_vector is not None:
        pop[0] = tuple(int(min(max(x, lo[i]), hi[i])) for i, x in enumerate(seed_vector))

    def tournament() -> tuple[int, ...]:
        picks = gen.integers(0, len(pop), size=params.tournament)
        return min((pop[int(i)] for i in picks), key=score)

    for _ in range(params.generations):
        ranked = sorted(pop, key=score)
        nxt = ranked[:params.elitism]
        while len(nxt) < params.population:
            a, b = tournament(), tournament()
            if gen.random() < params.crossover:
                mask = gen.random(len(bounds)) < 0.5
                child = [a[i] if mask[i] else b[i] for i in range(len(bounds))]
            else:
                child = list(a)
            for i in range(len(bounds)):
                if gen.random() < params.mutation:
                    child[i] = int(gen.integers(lo[i], hi[i], endpoint=True))
            nxt.append(tuple(child))
        pop = nxt
    return min(cache, key=lambda v: (cache[v], v))


class PbScalerPolicy:
    name = "pbscaler"

    def __init__(self, top_k: int = 2, damping: float = 0.85, iterations: int = 50,
                 w1: float = 10.0, w2: float = 1.0, scale_in_ratio: float = 0.6,
                 hold_pending: bool = True, estimator: str = "ground_truth", seed: int = 0,
                 population: int = 20, generations: int = 30, tournament: int = 3,
                 crossover: float = 0.9, mutation: float = 0.1, elitism: int = 2):
        if estimator not in ("ground_truth", "fitted"):
            raise ValueError(f"unknown estimator mode {estimator!r}")
        self.top_k = top_k
        self.damping = damping
        self.iterations = iterations
        self.w1 = w1
        self.w2 = w2
        self.scale_in_ratio = scale_in_ratio
        self.hold_pending = hold_pending
        self.estimator_mode = estimator
        self.ga = GaParams(population, generations, tournament, crossover, mutation, elitism)
        self._rng = SeededRng(seed, "pbscaler-ga")
        self._khpa = KhpaPolicy()
        self._history: dict[str, list[float]] = {}
        self._fit = OnlineDemandFit()
        self._warned: set[str] = set()
        self.last_ranking: list[str] = []

    def _degrade(self, inp: PolicyInput, why: str) -> list[ScalingDecision]:
        if why not in self._warned:
            _logger.warning(f"PBScaler {why}; falling back to threshold scaling")
            self._warned.add(why)
        else:
            _logger.debug(f"{inp.now_ms:.0f}ms PBScaler {why}")
        return self._khpa.decide(inp)

    def graph(self, inp: PolicyInput) -> nx.DiGraph:
        if inp.static_edges is not None:
            g = nx.DiGraph()
            g.add_edges_from(inp.static_edges)
            return g
        return inp.call_graph.to_graph()

    def personalization(self, inp: PolicyInput, nodes: list[str]) -> dict[str, float]:
        weights = {}
        for svc in nodes:
            view = inp.services.get(svc)
            hist = self._history.get(svc)
            if view is None or view.p90_ms is None or not hist:
                weights[svc] = 1.0
                continue
            median = statistics.median(hist)
            weights[svc] = max(1.0, view.p90_ms / median) if median > 0 else 1.0
        return weights

    def rank(self, inp: PolicyInput, g: nx.DiGraph) -> list[str]:
        scores = personalized_pagerank(g, self.personalization(inp, sorted(g.nodes)),
                                       self.damping, self.iterations)
        return sorted(scores, key=lambda s: (-scores[s], s))

    def _record_history(self, inp: PolicyInput) -> None:
        for svc, view in inp.services.items():
            if view.p90_ms is not None:
                self._history.setdefault(svc, []).append(view.p90_ms)

    def _model(self, inp: PolicyInput) -> EstimatorModel:
        if self.estimator_mode == "fitted":
            self._fit.update(inp)
            return self._fit.model(inp)
        return ground_truth_model(inp)

    def _search(self, inp: PolicyInput, model: EstimatorModel, candidates: list[str],
                bounds: list[tuple[int, int]]) -> tuple[int, ...]:
        assert inp.call_tree is not None
        base = {s: max(1, v.current) for s, v in inp.services.items()}
        rates = {s: v.request_rate_rps for s, v in inp.services.items()}

        def fitness(vec: tuple[int, ...]) -> float:
            replicas = dict(base)
            replicas.update(zip(candidates, vec))
            est = compose_p90(inp.call_tree, replicas, rates, model)  # type: ignore[arg-type]
            cost = sum(r / inp.services[s].max_replicas for s, r in zip(candidates, vec))
            return self.w1 * max(0.0, est / inp.slo_ms - 1.0) + self.w2 * cost

        seed = tuple(base[s] for s in candidates)
        return genetic_search(bounds, fitness, self._rng, self.ga, seed_vector=seed)

    def decide(self, inp: PolicyInput) -> list[ScalingDecision]:
        g = self.graph(inp)
        if g.number_of_edges() == 0:
            self._record_history(inp)
            return self._degrade(inp, "graph-unavailable")
        if inp.entry_p90_ms is None or inp.call_tree is None:
            self._record_history(inp)
            return []
        model = self._model(inp)
        tree_services = inp.call_tree.services()
        if not model.available(tree_services):
            self._record_history(inp)
            return self._degrade(inp, "estimator-unavailable")

        self._record_history(inp)
        out: list[ScalingDecision] = []
        if inp.entry_p90_ms > inp.slo_ms:
            ranking = self.rank(inp, g)
            self.last_ranking = ranking
            candidates = [s for s in ranking if s in inp.services][:self.top_k]
            bounds = []
            for s in candidates:
                v = inp.services[s]
                lo = max(1, v.min_replicas, v.current - 2)
                hi = max(lo, min(v.max_replicas, v.current + 5))
                if self.hold_pending and v.ready_count < v.current:
                    # Replicas from an earlier scale-out are still starting.
                    hi = max(lo, v.current)
                bounds.append((lo, hi))
            best = self._search(inp, model, candidates, bounds)
            for s, r in zip(candidates, best):
                if r != inp.services[s].current:
                    out.append(ScalingDecision(s, r, f"bottleneck:{s}"))
        elif inp.entry_p90_ms < self.scale_in_ratio * inp.slo_ms:
            candidates = [s for s in sorted(g.nodes) if s in inp.services]
            bounds = []
            for s in candidates:
                v = inp.services[s]
                lo = max(1, v.min_replicas, v.current - 2)
                bounds.append((min(lo, v.current), max(v.current, 1)))
            best = self._search(inp, model, candidates, bounds)
            for s, r in zip(candidates, best):
                if r < inp.services[s].current:
                    out.append(ScalingDecision(s, r, "scale-in"))
        return out
