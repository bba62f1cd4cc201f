"""Named, seeded random substreams.

Every random consumer (arrivals, demand jitter, genetic search, ...) draws from
its own stream.  A stream is a Philox counter-based generator keyed by the
run seed and a hash of the stream id, so adding a consumer never shifts the
values another consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def _stream_key(seed: int, stream_id: str) -> int:
    digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
    return ((seed & _U64) << 64) | int.from_bytes(digest[:8], "little")


class SeededRng:
    """Deterministic substream bound to (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: str):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = seed
        self.stream_id = stream_id
        self._gen = np.random.Generator(np.random.Philox(key=_stream_key(seed, stream_id)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def next_uniform(self) -> float:
        """Next value in [0, 1)."""
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def poisson(self, lam: float) -> int:
        if lam <= 0.0:
            return 0
        return int(self._gen.poisson(lam))

    def integers(self, low: int, high: int, size: int | None = None):
        """Integers in [low, high] inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def spawn(self, suffix: str) -> SeededRng:
        """Child stream named '<stream_id>/<suffix>'."""
        return SeededRng(self.seed, f"{self.stream_id}/{suffix}")


def next_uniform(stream: SeededRng) -> float:
    return stream.next_uniform()
