"""Threshold autoscaler in the style of the Kubernetes HPA."""

from __future__ import annotations

import logging
from collections import deque

from gapsim.autoscalers.common import PolicyInput, ScalingDecision, ServiceView, ceil_ratio
from gapsim.config import DOWNSCALE_STABILIZATION_MS

_logger = logging.getLogger("gapsim")


class KhpaPolicy:
    name = "khpa"

    def __init__(self, target_utilization: float = 0.5, tolerance: float = 0.1,
                 downscale_stabilization_ms: int = DOWNSCALE_STABILIZATION_MS):
        if target_utilization <= 0:
            raise ValueError("target_utilization must be > 0")
        self.target = target_utilization
        self.tolerance = tolerance
        self.stabilization_ms = downscale_stabilization_ms
        self._recs: dict[str, deque[tuple[float, int]]] = {}

    def raw_desired(self, view: ServiceView, utilization: float | None) -> int | None:
        """ceil(ready * u / target), or the current count inside the deadband. None = hold."""
        if utilization is None or view.ready_count == 0:
            return None
        ratio = utilization / self.target
        if abs(ratio - 1.0) <= self.tolerance:
            return view.current
        return ceil_ratio(view.ready_count * ratio)

    def stabilize(self, view: ServiceView, desired: int, now_ms: float) -> int:
        """Scale up at once; scale down only to the highest recent recommendation."""
        recs = self._recs.setdefault(view.service, deque())
        recs.append((now_ms, desired))
        while recs and recs[0][0] <= now_ms - self.stabilization_ms:
            recs.popleft()
        if desired >= view.current:
            return desired
        return min(view.current, max(r for _, r in recs))

    def decide_service(self, view: ServiceView, utilization: float | None, now_ms: float,
                       reason: str = "threshold") -> ScalingDecision | None:
        desired = self.raw_desired(view, utilization)
        if desired is None:
            return None
        target = self.stabilize(view, desired, now_ms)
        if target == view.current:
            return None
        return ScalingDecision(view.service, target, reason)

    def decide(self, inp: PolicyInput) -> list[ScalingDecision]:
        out = []
        for svc in sorted(inp.services):
            view = inp.services[svc]
            d = self.decide_service(view, view.utilization, inp.now_ms)
            if d is not None:
                out.append(d)
        return out
