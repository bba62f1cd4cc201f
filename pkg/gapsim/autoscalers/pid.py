"""PID control of replica counts on the utilization error.

The error is expressed in replicas: e = ready * (u - target) / target.
`PidPolicy` uses fixed gains; `FixedPidPolicy` looks its gains up in a
3x3 schedule keyed by request-rate bucket and utilization trend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from gapsim.autoscalers.common import PolicyInput, ScalingDecision, ServiceView, round_half_away

_logger = logging.getLogger("gapsim")

RATE_BUCKETS = ("low", "mid", "high")
TRENDS = ("-", "0", "+")


@dataclass(frozen=True)
class Gains:
    kp: float
    ki: float
    kd: float


@dataclass
class _PidState:
    integral: float = 0.0
    prev_error: float | None = None
    prev_utilization: float | None = None


class PidPolicy:
    name = "showar"

    def __init__(self, kp: float = 0.7, ki: float = 0.01, kd: float = 1.0,
                 target_utilization: float = 0.5):
        self.gains = Gains(kp, ki, kd)
        self.target = target_utilization
        self._state: dict[str, _PidState] = {}

    def gains_for(self, view: ServiceView, inp: PolicyInput, state: _PidState) -> tuple[Gains, str]:
        return self.gains, "pid"

    def control(self, view: ServiceView, utilization: float, gains: Gains,
                state: _PidState, dt_s: float) -> int:
        """Advance the controller one sync and return the new desired count."""
        e = view.ready_count * (utilization - self.target) / self.target
        state.integral += e * dt_s
        bound = 2.0 * view.max_replicas
        state.integral = max(-bound, min(bound, state.integral))
        deriv = 0.0 if state.prev_error is None or dt_s <= 0 else (e - state.prev_error) / dt_s
        state.prev_error = e
        u = gains.kp * e + gains.ki * state.integral + gains.kd * deriv
        return max(0, view.current + round_half_away(u))

    def decide(self, inp: PolicyInput) -> list[ScalingDecision]:
        out = []
        dt_s = inp.sync_period_ms / 1000.0
        for svc in sorted(inp.services):
            view = inp.services[svc]
            if view.utilization is None:
                continue
            state = self._state.setdefault(svc, _PidState())
            gains, reason = self.gains_for(view, inp, state)
            desired = self.control(view, view.utilization, gains, state, dt_s)
            state.prev_utilization = view.utilization
            if desired != view.current:
                out.append(ScalingDecision(svc, desired, reason))
        return out


# Desk-scale stand-in for an offline-trained gain tuner: more aggressive when
# traffic is high and rising, gentler when it is low or falling.
DEFAULT_GAIN_SCHEDULE: dict[tuple[str, str], Gains] = {
    ("low", "-"): Gains(0.4, 0.005, 0.5),
    ("low", "0"): Gains(0.5, 0.005, 0.5),
    ("low", "+"): Gains(0.7, 0.01, 1.0),
    ("mid", "-"): Gains(0.5, 0.01, 0.5),
    ("mid", "0"): Gains(0.7, 0.01, 1.0),
    ("mid", "+"): Gains(0.9, 0.015, 1.5),
    ("high", "-"): Gains(0.6, 0.01, 1.0),
    ("high", "0"): Gains(0.9, 0.015, 1.5),
    ("high", "+"): Gains(1.2, 0.02, 2.0),
}


def trend_sign(prev: float | None, current: float, deadband: float = 0.02) -> str:
    if prev is None or abs(current - prev) <= deadband:
        return "0"
    return "+" if current > prev else "-"


def rate_bucket(rate_rps: float, low_rps: float, high_rps: float) -> str:
    if rate_rps < low_rps:
        return "low"
    if rate_rps < high_rps:
        return "mid"
    return "high"


class FixedPidPolicy(PidPolicy):
    name = "fixed-pid"

    def __init__(self, schedule: dict[tuple[str, str], Gains] | None = None,
                 rate_low_rps: float = 20.0, rate_high_rps: float = 60.0,
                 trend_deadband: float = 0.02, target_utilization: float = 0.5):
        super().__init__(target_utilization=target_utilization)
        self.schedule = dict(DEFAULT_GAIN_SCHEDULE if schedule is None else schedule)
        if not self.schedule:
            raise ValueError("gain schedule is empty")
        self.rate_low_rps = rate_low_rps
        self.rate_high_rps = rate_high_rps
        self.trend_deadband = trend_deadband

    @classmethod
    def from_params(cls, schedule: list[dict] | None = None, **kwargs) -> FixedPidPolicy:
        """Build from scenario params: schedule rows {rate, trend, kp, ki, kd}."""
        parsed = None
        if schedule is not None:
            parsed = {(r["rate"], r["trend"]): Gains(r["kp"], r["ki"], r["kd"]) for r in schedule}
        return cls(schedule=parsed, **kwargs)

    def lookup(self, bucket: str, trend: str) -> Gains:
        """Exact entry, else the nearest one by bucket and trend distance."""
        key = (bucket, trend)
        if key in self.schedule:
            return self.schedule[key]

        def distance(k: tuple[str, str]) -> tuple[int, str, str]:
            d = abs(RATE_BUCKETS.index(k[0]) - RATE_BUCKETS.index(bucket)) \
                + abs(TRENDS.index(k[1]) - TRENDS.index(trend))
            return d, k[0], k[1]

        nearest = min(self.schedule, key=distance)
        _logger.warning(f"Gain schedule has no entry {key}, using {nearest}")
        return self.schedule[nearest]

    def gains_for(self, view: ServiceView, inp: PolicyInput, state: _PidState) -> tuple[Gains, str]:
        bucket = rate_bucket(inp.entry_rate_rps, self.rate_low_rps, self.rate_high_rps)
        assert view.utilization is not None
        trend = trend_sign(state.prev_utilization, view.utilization, self.trend_deadband)
        return self.lookup(bucket, trend), f"pid:{bucket}{trend}"
