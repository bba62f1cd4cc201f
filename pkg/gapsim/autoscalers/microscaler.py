"""Bayesian-optimization search over replica counts for services over their latency budget."""

from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from gapsim.autoscalers.common import PolicyInput, ScalingDecision

_logger = logging.getLogger("gapsim")


def rbf(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    d = a[:, None] - b[None, :]
    return np.exp(-(d * d) / (2.0 * bandwidth * bandwidth))


def gp_posterior(xs: np.ndarray, ys: np.ndarray, cand: np.ndarray,
                 bandwidth: float = 1.5, noise: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean GP on centered costs; returns (mean, std) at the candidates."""
    y_mean = ys.mean()
    k = rbf(xs, xs, bandwidth) + noise * np.eye(xs.size)
    ks = rbf(cand, xs, bandwidth)
    factor = cho_factor(k, lower=True)
    mu = ks @ cho_solve(factor, ys - y_mean) + y_mean
    var = 1.0 - np.einsum("ij,ji->i", ks, cho_solve(factor, ks.T))
    return mu, np.sqrt(np.clip(var, 0.0, None))


def expected_improvement(observations: dict[int, float], candidates: list[int],
                         bandwidth: float = 1.5, noise: float = 1e-3) -> np.ndarray:
    """EI for cost minimization. Observed candidates are exact: EI = max(0, best - cost)."""
    xs = np.array(sorted(observations), dtype=float)
    ys = np.array([observations[int(x)] for x in xs], dtype=float)
    cand = np.array(candidates, dtype=float)
    best = float(ys.min())
    mu, sigma = gp_posterior(xs, ys, cand, bandwidth, noise)
    ei = np.zeros(cand.size)
    for i, c in enumerate(candidates):
        if c in observations:
            ei[i] = max(0.0, best - observations[c])
        elif sigma[i] <= 0.0:
            ei[i] = max(0.0, best - mu[i])
        else:
            z = (best - mu[i]) / sigma[i]
            ei[i] = (best - mu[i]) * norm.cdf(z) + sigma[i] * norm.pdf(z)
    return ei


def propose(observations: dict[int, float], candidates: list[int], current: int,
            bandwidth: float = 1.5, noise: float = 1e-3) -> int:
    """Argmax-EI candidate, smallest on ties; current+1 with nothing observed yet."""
    if not observations:
        return min(current + 1, max(candidates))
    ei = expected_improvement(observations, candidates, bandwidth, noise)
    best = ei.max()
    for c, v in zip(candidates, ei):
        if v >= best - 1e-12:
            return c
    return candidates[0]


class MicroScalerPolicy:
    name = "microscaler"

    def __init__(self, alpha: float = 1.0, beta: float = 0.3, bandwidth: float = 1.5,
                 noise: float = 1e-3, epochs: int = 10):
        if epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {epochs}")
        self.alpha = alpha
        self.beta = beta
        self.bandwidth = bandwidth
        self.noise = noise
        self.epochs = epochs
        self._flagged: tuple[str, ...] = ()
        self._episode: dict[str, dict[int, float]] = {}

    def budget_ms(self, inp: PolicyInput, service: str) -> float | None:
        """SLO scaled by the service's share of end-to-end mean latency."""
        view = inp.services[service]
        if view.mean_latency_ms is None or not inp.entry_mean_ms:
            return None
        share = min(1.0, view.mean_latency_ms / inp.entry_mean_ms)
        return inp.slo_ms * share

    def cost(self, p90_ms: float, budget_ms: float, replicas: int, max_replicas: int) -> float:
        return self.alpha * max(0.0, p90_ms / budget_ms - 1.0) + self.beta * replicas / max_replicas

    def decide(self, inp: PolicyInput) -> list[ScalingDecision]:
        budgets: dict[str, float] = {}
        for svc in sorted(inp.services):
            view = inp.services[svc]
            b = self.budget_ms(inp, svc)
            if b is not None and b > 0 and view.p90_ms is not None:
                budgets[svc] = b
        if not budgets:
            return []
        flagged = tuple(s for s, b in budgets.items() if inp.services[s].p90_ms > b)  # type: ignore[operator]
        if flagged != self._flagged:
            _logger.debug(f"{inp.now_ms:.0f}ms new episode, flagged={flagged}")
            self._flagged = flagged
            self._episode = {s: {} for s in flagged}

        out = []
        for svc in flagged:
            view = inp.services[svc]
            assert view.p90_ms is not None
            obs = self._episode[svc]
            c = self.cost(view.p90_ms, budgets[svc], view.current, view.max_replicas)
            candidates = list(range(max(1, view.min_replicas), view.max_replicas + 1))
            if not obs:
                target = propose({}, candidates, view.current)
                obs[view.current] = c
            else:
                obs[view.current] = c
                if len(obs) >= self.epochs:
                    # Search budget spent: settle on the cheapest count seen this episode.
                    target = min(obs, key=lambda r: (obs[r], r))
                else:
                    target = propose(obs, candidates, view.current, self.bandwidth, self.noise)
            if target != view.current:
                out.append(ScalingDecision(svc, target, "bayesopt"))
        return out
