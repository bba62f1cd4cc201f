"""Shared fixtures for the gapsim test suite."""

import copy
import json

import pytest

from gapsim.cluster import BootProfile, Cluster, Deployment, NamespaceQuota, Node, ResourceSpec
from gapsim.scenario import PRESETS_DIR, ScenarioConfig

_BASELINE = json.loads((PRESETS_DIR / "baseline.json").read_text(encoding="utf-8"))


def pytest_collection_modifyitems(config, items):
    """Skip acceptance tests unless explicitly requested via -m acceptance."""
    run_acceptance = False
    markexpr = config.getoption("-m", default="")
    if "acceptance" in markexpr:
        run_acceptance = True

    for item in items:
        if "acceptance" in item.keywords and not run_acceptance:
            item.add_marker(pytest.mark.skip(reason="acceptance tests require -m acceptance"))


def baseline_doc() -> dict:
    """A fresh, mutable copy of the baseline preset document."""
    return copy.deepcopy(_BASELINE)


def make_scenario(doc: dict) -> ScenarioConfig:
    return ScenarioConfig.model_validate(doc)


@pytest.fixture
def doc():
    return baseline_doc()


@pytest.fixture
def scenario():
    return make_scenario(baseline_doc())


@pytest.fixture
def short_doc():
    """Baseline at desk size: one minute, constant light load."""
    d = baseline_doc()
    d["duration_ms"] = 60_000
    d["workload"] = {"mode": "open", "generator": {"kind": "constant", "rate_rps": 5}}
    return d


def step_cluster(cluster: Cluster, steps: int, start_ms: float = 0.0, step_ms: float = 100.0) -> float:
    """Drive allocation, settle and probes with no request traffic. Returns the end time."""
    t = start_ms
    for _ in range(steps):
        cluster.allocate()
        cluster.settle(t, t + step_ms, {})
        cluster.probe_all(t + step_ms)
        t += step_ms
    return t


@pytest.fixture
def make_cluster():
    """Factory for a one-node, one-deployment cluster."""

    def _make(capacity: int = 4000, request: int = 200, limit: int | None = 400,
              boot: BootProfile | None = None, readiness=None, liveness=None,
              min_replicas: int = 1, max_replicas: int = 5, rate_limit: int | None = None,
              quota: NamespaceQuota | None = None) -> tuple[Cluster, Deployment]:
        dep = Deployment(
            service="svc", namespace="ns", min_replicas=min_replicas, max_replicas=max_replicas,
            resources=ResourceSpec(request, limit, 100), boot=boot or BootProfile(),
            scale_rate_limit=rate_limit, readiness=readiness, liveness=liveness,
        )
        cluster = Cluster([Node("n0", capacity)], [dep], {"ns": quota} if quota else None)
        return cluster, dep

    return _make
