"""Threshold scaling on a linear-regression forecast of utilization."""

from __future__ import annotations

import logging
from collections import deque

import numpy as np

from gapsim.autoscalers.common import PolicyInput, ScalingDecision
from gapsim.autoscalers.khpa import KhpaPolicy
from gapsim.config import DOWNSCALE_STABILIZATION_MS

_logger = logging.getLogger("gapsim")


def fit_line(ts: list[float] | np.ndarray, ys: list[float] | np.ndarray) -> tuple[float, float]:
    """Least-squares (slope, intercept) of y over t."""
    t = np.asarray(ts, dtype=float)
    y = np.asarray(ys, dtype=float)
    if t.size < 2:
        raise ValueError("need at least two samples")
    t0 = t[0]
    a = np.column_stack([t - t0, np.ones_like(t)])
    (slope, icpt), *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(slope), float(icpt - slope * t0)


class HeatPolicy:
    name = "heat"

    def __init__(self, window: int = 8, horizon_ms: int = 60_000, threshold: float = 0.5,
                 tolerance: float = 0.1, downscale_stabilization_ms: int = DOWNSCALE_STABILIZATION_MS):
        self.window = window
        self.horizon_ms = horizon_ms
        self._khpa = KhpaPolicy(threshold, tolerance, downscale_stabilization_ms)
        self._samples: dict[str, deque[tuple[float, float]]] = {}

    def predict(self, service: str, now_ms: float) -> float | None:
        samples = self._samples.get(service)
        if not samples or len(samples) < 2:
            return None
        ts, ys = zip(*samples)
        slope, icpt = fit_line(ts, ys)
        return max(0.0, slope * (now_ms + self.horizon_ms) + icpt)

    def decide(self, inp: PolicyInput) -> list[ScalingDecision]:
        out = []
        for svc in sorted(inp.services):
            view = inp.services[svc]
            if view.utilization is None:
                continue
            self._samples.setdefault(svc, deque(maxlen=self.window)).append((inp.now_ms, view.utilization))
            predicted = self.predict(svc, inp.now_ms)
            if predicted is None:
                d = self._khpa.decide_service(view, view.utilization, inp.now_ms)
            else:
                d = self._khpa.decide_service(view, predicted, inp.now_ms, reason="forecast")
            if d is not None:
                out.append(d)
        return out
