"""Tests for gapsim.tick -- the fixed-step loop, wiring and determinism."""

import pytest

from gapsim.app import CallPattern
from gapsim.autoscalers.common import ScalingDecision
from gapsim.cluster import PodPhase
from gapsim.gaps import assemble
from gapsim.scenario import ScenarioError, load_scenario
from gapsim.tick import SimClock, Simulation, StepContext, build_simulation, run
from tests.conftest import make_scenario


class _ScaleCarts:
    """Asks for three carts replicas at every sync, plus one bogus target."""
    name = "scale-carts"

    def __init__(self):
        self.inputs = []

    def decide(self, inp):
        self.inputs.append(inp)
        return [ScalingDecision("carts", 3, "test"), ScalingDecision("ghost", 2, "test")]


def _system_names(sim):
    return [fn.__name__ for _, fn in sim._systems]


# ---------------------------------------------------------------------------
# Clock
# ---------------------------------------------------------------------------

class TestClock:
    def test_advance(self):
        clock = SimClock(100)
        clock.advance()
        clock.advance()
        assert (clock.step_index, clock.now_ms) == (2, 200)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            SimClock(0)

    def test_context_dt(self):
        assert StepContext(3, 200.0, 300.0).dt == 100.0


# ---------------------------------------------------------------------------
# Wiring
# ---------------------------------------------------------------------------

class TestWiring:
    def test_phase_order(self, scenario):
        sim = build_simulation(scenario, debug_checks=False)
        assert _system_names(sim) == [
            "arrivals", "progress", "settle", "probes", "sample", "sync", "actuate", "export",
        ]

    def test_watchdog_and_checks_registered(self, doc):
        doc["remediations"]["G6"] = {"applied": True, "strategy": "log_watch"}
        sim = build_simulation(make_scenario(doc), debug_checks=True)
        names = _system_names(sim)
        assert names.index("watchdog") < names.index("sync")
        assert names.index("check") == names.index("export") - 1

    def test_sync_interval(self, scenario):
        sim = build_simulation(scenario, debug_checks=False)
        intervals = {fn.__name__: n for n, fn in sim._systems}
        assert intervals["sync"] == 150
        assert intervals["arrivals"] == 1
        assert intervals["export"] == 150

    def test_warm_start_seeds_ready_pods(self, scenario):
        sim = build_simulation(scenario)
        for dep in sim.cluster.deployments.values():
            assert [p.phase for p in dep.pods] == [PodPhase.READY]

    def test_cold_start(self):
        sim = build_simulation(load_scenario("g4"))
        assert all(p.phase is PodPhase.INIT for p in sim.cluster.all_pods())

    def test_quota_carried_into_cluster(self, scenario):
        sim = build_simulation(scenario)
        assert sim.cluster.quotas["sock-shop"].cpu_request_cap_mcores == 16_000

    def test_error_mode_override_reaches_topology(self, doc):
        doc["gaps"]["G6"] = {"active": True}
        sim = build_simulation(make_scenario(doc))
        assert sim.topology.endpoint("front-end", "login").error_mode.value == "mask"

    def test_static_edges_and_override(self, doc):
        doc["remediations"]["G8"] = {"applied": True, "strategy": "hardcoded_graph"}
        sim = build_simulation(make_scenario(doc))
        assert set(sim.static_edges) == {("front-end", "user"), ("front-end", "carts")}
        doc["remediations"]["G8"] = {"applied": True, "strategy": "chained"}
        sim = build_simulation(make_scenario(doc))
        assert sim.pattern_override is CallPattern.CHAINED
        assert sim.static_edges is None

    def test_unknown_policy(self, scenario):
        with pytest.raises(ScenarioError):
            build_simulation(scenario, "oracle")

    def test_seed_override(self, scenario):
        assert build_simulation(scenario, seed=11).seed == 11
        assert build_simulation(scenario).seed == 7


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

class TestRun:
    def test_zero_duration(self, short_doc):
        sim = build_simulation(make_scenario(short_doc))
        report = sim.run(0)
        assert sim.clock.step_index == 0
        assert report.requests == 0
        assert report.timeseries == []

    def test_partial_step_rounds_up(self, short_doc):
        sim = build_simulation(make_scenario(short_doc))
        report = sim.run(250)
        assert sim.clock.now_ms == 300
        assert report.steps == 3

    def test_export_cadence(self, short_doc):
        assert len(run(make_scenario(short_doc)).timeseries) == 4
        short_doc["report"] = {"timeseries_every_ms": 1000}
        rows = run(make_scenario(short_doc)).timeseries
        assert len(rows) == 60
        assert rows[0]["step_ms"] == 1000

    def test_same_seed_same_run(self, short_doc):
        s = make_scenario(short_doc)
        a, b = run(s), run(s)
        assert a.requests == b.requests > 0
        assert a.timeseries == b.timeseries
        assert a.cpu_core_minutes == b.cpu_core_minutes

    def test_light_load_meets_slo(self, short_doc):
        report = run(make_scenario(short_doc))
        assert report.failed_requests == 0
        assert report.observed_p90_ms < 150.0

    def test_decisions_actuated_at_sync(self, short_doc):
        s = make_scenario(short_doc)
        policy = _ScaleCarts()
        sim = Simulation(s, assemble(s), policy)
        report = sim.run(30_000)
        assert [(d["sync_ms"], d["current"], d["target_actuated"]) for d in report.decisions] == [
            (15_000, 1, 3), (30_000, 3, 3),
        ]
        assert [i.now_ms for i in policy.inputs] == [15_000.0, 30_000.0]
        assert sim.cluster.deployments["carts"].replicas_desired == 3

    def test_policy_input(self, short_doc):
        s = make_scenario(short_doc)
        policy = _ScaleCarts()
        Simulation(s, assemble(s), policy).run(15_000)
        (inp,) = policy.inputs
        assert inp.entry_service == "front-end"
        assert inp.ground_truth_demand_ms == {"front-end": 4, "user": 8, "carts": 16}
        assert inp.services["carts"].capacity_mcores == 400.0
        assert inp.services["user"].ready_count == 1
        assert inp.call_tree.services() == ["front-end", "user", "carts"]
        assert inp.entry_p90_ms is not None

    def test_stress_scales_ground_truth(self, short_doc):
        short_doc["stress"] = [{"service": "carts", "demand_multiplier": 4.0}]
        s = make_scenario(short_doc)
        policy = _ScaleCarts()
        Simulation(s, assemble(s), policy).run(15_000)
        assert policy.inputs[0].ground_truth_demand_ms["carts"] == 64

    def test_scale_in_drops_pod_series(self, short_doc):
        short_doc["deployments"][1]["initial_replicas"] = 2
        short_doc["autoscaler"] = {"name": "none"}
        sim = build_simulation(make_scenario(short_doc))
        sim.run(5_000)
        dep = sim.cluster.deployments["user"]
        gone = dep.pods[-1]
        assert f"cpu/{gone.id}" in sim.telemetry.window
        sim.cluster.scale_to(dep, 1, float(sim.clock.now_ms))
        sim.run(15_000)
        assert gone not in dep.pods
        assert f"cpu/{gone.id}" not in sim.telemetry.window
        assert f"failures/{gone.id}" not in sim.telemetry.window

    def test_runaway_scale_out_without_load(self):
        s = load_scenario("runaway")
        sim = build_simulation(s)
        report = sim.run(60_000)
        assert report.requests == 0
        assert sim.cluster.deployments["carts"].replicas_desired >= 4
        targets = [d["target_actuated"] for d in report.decisions if d["service"] == "carts"]
        assert targets == sorted(targets)
