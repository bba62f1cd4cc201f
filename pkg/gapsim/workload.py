"""Arrival generation: rate traces, synthetic generators, open and closed loop."""

from __future__ import annotations

import bisect
import heapq
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

from gapsim.rng import SeededRng

_logger = logging.getLogger("gapsim")

BUNDLED_TRACE = Path(__file__).parent / "traces" / "worldcup98_shape.csv"


class TraceParseError(ValueError):
    """A trace row could not be parsed; `line` is 1-based."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyTraceError(ValueError):
    pass


@dataclass
class RateTrace:
    offsets_s: list[float]
    rates_rps: list[float]
    scale_factor: float = 1.0
    loop: bool = True

    def __post_init__(self) -> None:
        if not self.offsets_s:
            raise EmptyTraceError("trace has no bins")
        if self.offsets_s[0] != 0:
            raise ValueError("trace offsets must start at 0")
        if any(b <= a for a, b in zip(self.offsets_s, self.offsets_s[1:])):
            raise ValueError("trace offsets must be strictly increasing")
        if any(r < 0 for r in self.rates_rps):
            raise ValueError("trace rates must be >= 0")

    @property
    def period_s(self) -> float:
        """Length of one pass; the last bin lasts as long as the one before it."""
        if len(self.offsets_s) == 1:
            return math.inf
        return self.offsets_s[-1] + (self.offsets_s[-1] - self.offsets_s[-2])

    def rate_at(self, t_ms: float) -> float:
        """Piecewise-constant scaled rate at time t."""
        t = t_ms / 1000.0
        if self.loop and math.isfinite(self.period_s):
            t = t % self.period_s
        idx = bisect.bisect_right(self.offsets_s, t) - 1
        return self.rates_rps[max(idx, 0)] * self.scale_factor


def load_trace(path: str | Path, scale_factor: float = 1.0, loop: bool = True) -> RateTrace:
    """Parse an 'offset_seconds,rate_rps' file ('#' comments, LF or CRLF)."""
    text = Path(path).read_text(encoding="utf-8")
    offsets: list[float] = []
    rates: list[float] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise TraceParseError(lineno, f"expected 'offset,rate', got {raw!r}")
        try:
            offset, rate = float(parts[0]), float(parts[1])
        except ValueError:
            raise TraceParseError(lineno, f"non-numeric value in {raw!r}") from None
        if not offsets and offset != 0:
            raise TraceParseError(lineno, "first offset must be 0")
        if offsets and offset <= offsets[-1]:
            raise TraceParseError(lineno, f"offset {offset:g} not after {offsets[-1]:g}")
        if rate < 0:
            raise TraceParseError(lineno, f"negative rate {rate:g}")
        offsets.append(offset)
        rates.append(rate)
    if not offsets:
        raise EmptyTraceError(f"{path}: no rate bins")
    _logger.debug(f"Loaded trace {path}: {len(offsets)} bins")
    return RateTrace(offsets, rates, scale_factor=scale_factor, loop=loop)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Generator:
    kind: str  # constant | step | sinusoid | flash_crowd
    rate_rps: float
    step_at_ms: float = 0.0
    step_rate_rps: float = 0.0
    amplitude_rps: float = 0.0
    period_ms: float = 600_000.0
    burst_start_ms: float = 0.0
    burst_end_ms: float = 0.0
    burst_multiplier: float = 1.0

    def rate_at(self, t_ms: float) -> float:
        if self.kind == "constant":
            return self.rate_rps
        if self.kind == "step":
            return self.step_rate_rps if t_ms >= self.step_at_ms else self.rate_rps
        if self.kind == "sinusoid":
            return max(0.0, self.rate_rps + self.amplitude_rps * math.sin(2 * math.pi * t_ms / self.period_ms))
        if self.kind == "flash_crowd":
            if self.burst_start_ms <= t_ms < self.burst_end_ms:
                return self.rate_rps * self.burst_multiplier
            return self.rate_rps
        raise ValueError(f"unknown generator kind {self.kind!r}")


class RateSource:
    """Anything with rate_at(t_ms) -> rps."""

    def __init__(self, fn: Callable[[float], float], scale_factor: float = 1.0):
        self._fn = fn
        self.scale_factor = scale_factor

    def rate_at(self, t_ms: float) -> float:
        return self._fn(t_ms) * self.scale_factor


# ---------------------------------------------------------------------------
# Injection
# ---------------------------------------------------------------------------

class OpenLoop:
    """Poisson arrivals at the piecewise-constant rate, uniform offsets within the step."""

    def __init__(self, source: RateTrace | RateSource, rng: SeededRng):
        self.source = source
        self._rng = rng

    def arrivals_in_step(self, t0: float, t1: float) -> list[float]:
        rate = self.source.rate_at(t0)
        n = self._rng.poisson(rate * (t1 - t0) / 1000.0)
        if n == 0:
            return []
        offsets = sorted(float(u) for u in self._rng.uniforms(n))
        return [t0 + u * (t1 - t0) for u in offsets]


@dataclass
class UserPool:
    concurrent_users: int
    think_time_ms: float
    _next: list[tuple[float, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.concurrent_users < 0:
            raise ValueError("concurrent_users must be >= 0")
        if self.think_time_ms < 0:
            raise ValueError("think_time_ms must be >= 0")


class ClosedLoop:
    """Each user issues a request, waits for it, thinks, and repeats."""

    def __init__(self, pool: UserPool, rng: SeededRng,
                 inject: Callable[[float], object] | None = None):
        self.pool = pool
        self._rng = rng
        self._inject = inject
        self._owner: dict[int, int] = {}  # request id -> user
        self._step_end = 0.0
        self._ready: list[tuple[float, int]] = []
        for user in range(pool.concurrent_users):
            heapq.heappush(self._ready, (self._rng.next_uniform() * pool.think_time_ms, user))

    def bind(self, inject: Callable[[float], object]) -> None:
        self._inject = inject

    def arrivals_in_step(self, t0: float, t1: float) -> list[tuple[float, int]]:
        self._step_end = t1
        out: list[tuple[float, int]] = []
        while self._ready and self._ready[0][0] < t1:
            out.append(heapq.heappop(self._ready))
        return out

    def issued(self, request_id: int, user: int) -> None:
        self._owner[request_id] = user

    def on_complete(self, request_id: int, completion_ms: float) -> None:
        user = self._owner.pop(request_id, None)
        if user is None:
            return
        nxt = completion_ms + self.pool.think_time_ms
        if nxt < self._step_end and self._inject is not None:
            req = self._inject(nxt)
            self.issued(getattr(req, "id"), user)
        else:
            heapq.heappush(self._ready, (nxt, user))
