"""Tests for gapsim.scenario -- schema validation, presets and 'extends'."""

import json

import pytest

from gapsim.scenario import (
    PRESETS_DIR,
    ScenarioError,
    deep_merge,
    list_presets,
    load_scenario,
    resolve_scenario_path,
    scenario_schema,
    validate,
)
from gapsim.workload import BUNDLED_TRACE
from tests.conftest import baseline_doc, make_scenario


@pytest.fixture
def write_doc(tmp_path):
    """Dumps a document to <tmp>/<name> and returns the path."""

    def _write(doc, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path

    return _write


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

class TestPresets:
    def test_bundled_presets(self):
        names = list_presets()
        assert names == sorted(p.stem for p in PRESETS_DIR.glob("*.json"))
        for expected in ("baseline", "sock-shop", "runaway", "paper-evaluation", "benchmark-as-found"):
            assert expected in names
        assert all(f"g{i}" in names for i in range(1, 11))

    @pytest.mark.parametrize("name", list_presets())
    def test_every_preset_validates(self, name):
        errors, _ = validate(name)
        assert errors == []

    def test_extends_merges_parent(self):
        s = load_scenario("g3")
        assert s.name == "g3"
        assert s.seed == 7
        assert s.gaps.g3.active
        assert s.service_names() == ["front-end", "user", "carts"]

    @pytest.mark.parametrize("name", ["g6", "g8"])
    def test_policy_switch_drops_parent_params(self, name):
        s = load_scenario(name)
        assert s.autoscaler.name == "pbscaler"
        assert s.autoscaler.params == {}

    def test_same_policy_merges_params(self, write_doc):
        path = write_doc({"extends": "baseline", "name": "c",
                          "autoscaler": {"params": {"tolerance": 0.2}}})
        assert load_scenario(path).autoscaler.params == {"target_utilization": 0.5, "tolerance": 0.2}

    def test_switched_policy_keeps_own_params(self, write_doc):
        path = write_doc({"extends": "baseline", "name": "c",
                          "autoscaler": {"name": "heat", "params": {"window": 4}}})
        assert load_scenario(path).autoscaler.params == {"window": 4}

    def test_sock_shop_chain(self):
        s = load_scenario("benchmark-as-found")
        assert s.duration_ms == 3_600_000
        assert s.gaps.g1.services == ["carts"]
        assert s.gaps.g10.active

    def test_unknown_preset(self):
        with pytest.raises(ScenarioError, match="presets"):
            resolve_scenario_path("no-such-preset")


# ---------------------------------------------------------------------------
# Loading files
# ---------------------------------------------------------------------------

class TestLoad:
    def test_file_extends_preset(self, write_doc):
        path = write_doc({"extends": "baseline", "name": "child", "seed": 3})
        s = load_scenario(path)
        assert s.name == "child"
        assert s.seed == 3
        assert s.base_dir == str(path.parent)

    def test_circular_extends(self, write_doc):
        write_doc({"extends": "b.json", "name": "a"}, "a.json")
        b = write_doc({"extends": "a.json", "name": "b"}, "b.json")
        with pytest.raises(ScenarioError, match="circular"):
            load_scenario(b)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError, match="not found"):
            load_scenario(tmp_path / "nope.json")

    def test_syntax_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "name": "x",\n  oops\n}', encoding="utf-8")
        with pytest.raises(ScenarioError, match="line 3"):
            load_scenario(path)

    def test_top_level_must_be_object(self, write_doc):
        with pytest.raises(ScenarioError, match="object"):
            load_scenario(write_doc([1, 2]))

    def test_validation_error_names_field(self, write_doc):
        doc = baseline_doc()
        doc["deployments"][0]["min_replicas"] = 5
        doc["deployments"][0]["max_replicas"] = 2
        with pytest.raises(ScenarioError, match="min>max"):
            load_scenario(write_doc(doc))

    def test_relative_trace_path(self, write_doc):
        path = write_doc({"extends": "baseline", "name": "t", "workload": {"trace": "trace.csv"}})
        assert load_scenario(path).trace_path() == path.parent / "trace.csv"

    def test_bundled_trace_path(self, scenario):
        assert scenario.trace_path() == BUNDLED_TRACE

    def test_generator_has_no_trace(self, short_doc):
        assert make_scenario(short_doc).trace_path() is None


# ---------------------------------------------------------------------------
# Schema rules
# ---------------------------------------------------------------------------

class TestSchema:
    def test_gap_aliases(self, doc):
        doc["gaps"] = {"g2": {"active": True}}
        assert make_scenario(doc).gaps.g2.active

    def test_extra_fields_rejected(self, doc):
        doc["surprise"] = 1
        with pytest.raises(ValueError):
            make_scenario(doc)

    def test_unknown_autoscaler(self, doc):
        doc["autoscaler"] = {"name": "oracle"}
        with pytest.raises(ValueError, match="unknown autoscaler"):
            make_scenario(doc)

    def test_sync_multiple_of_step(self, doc):
        doc["sync_period_ms"] = 15_050
        with pytest.raises(ValueError, match="multiple"):
            make_scenario(doc)

    def test_every_service_needs_a_deployment(self, doc):
        doc["deployments"] = doc["deployments"][:2]
        with pytest.raises(ValueError, match="carts"):
            make_scenario(doc)

    def test_unknown_node_pin(self, doc):
        doc["deployments"][0]["node"] = "node-z"
        with pytest.raises(ValueError, match="unknown node"):
            make_scenario(doc)

    def test_unknown_callee(self, doc):
        doc["topology"]["services"][0]["endpoints"][0]["downstream"].append({"service": "user", "endpoint": "x"})
        with pytest.raises(ValueError, match="unknown"):
            make_scenario(doc)

    def test_limit_below_request(self, doc):
        doc["deployments"][0]["resources"]["limit_mcores"] = 100
        with pytest.raises(ValueError):
            make_scenario(doc)

    def test_open_loop_needs_one_source(self, doc):
        doc["workload"] = {"mode": "open"}
        with pytest.raises(ValueError):
            make_scenario(doc)

    def test_start_replicas_clamped(self, doc):
        doc["deployments"][0]["initial_replicas"] = 50
        doc["deployments"][1].pop("initial_replicas")
        doc["deployments"][1]["min_replicas"] = 2
        s = make_scenario(doc)
        assert s.deployment("front-end").start_replicas == 20
        assert s.deployment("user").start_replicas == 2

    def test_default_node_names(self, doc):
        doc["cluster"]["nodes"] = [{"capacity_mcores": 4000}, {"name": "big"}]
        assert make_scenario(doc).node_names() == ["node-0", "big"]

    def test_json_schema(self):
        schema = scenario_schema()
        assert "duration_ms" in schema["properties"]
        assert "G1" in schema["$defs"]["GapConfig"]["properties"]


# ---------------------------------------------------------------------------
# Static validation
# ---------------------------------------------------------------------------

class TestValidate:
    def test_baseline_clean(self):
        assert validate("baseline") == ([], [])

    def test_restart_loop_warning(self):
        errors, warnings = validate("g5")
        assert errors == []
        assert len(warnings) == 1
        assert warnings[0].startswith("carts:")
        assert "restart loop" in warnings[0]

    def test_readiness_beyond_run(self, write_doc):
        doc = baseline_doc()
        doc["duration_ms"] = 5000
        _, warnings = validate(write_doc(doc))
        assert len(warnings) == 3

    def test_missing_trace_file(self, write_doc):
        path = write_doc({"extends": "baseline", "name": "t", "workload": {"trace": "missing.csv"}})
        errors, _ = validate(path)
        assert any("file not found" in e for e in errors)

    def test_inconsistent_config_reported(self, write_doc):
        doc = baseline_doc()
        doc["gaps"]["G3"] = {"active": True}
        doc["remediations"]["G4"] = {"applied": True}
        errors, _ = validate(write_doc(doc))
        assert len(errors) == 1
        assert "G4 remediation with G3 gap" in errors[0]

    def test_bad_policy_params_reported(self, write_doc):
        doc = baseline_doc()
        doc["autoscaler"] = {"name": "microscaler", "params": {"target_utilization": 0.5}}
        errors, _ = validate(write_doc(doc))
        assert len(errors) == 1
        assert errors[0].startswith("autoscaler.params:")

    def test_unbounded_limit_needs_g9(self, write_doc):
        doc = baseline_doc()
        doc["deployments"][1]["resources"]["limit_mcores"] = None
        errors, _ = validate(write_doc(doc))
        assert errors == ["deployments.user.resources.limit_mcores: unbounded limit requires gap G9"]
        doc["gaps"]["G9"] = {"active": True}
        assert validate(write_doc(doc))[0] == []

    def test_load_failure_never_raises(self, tmp_path):
        errors, warnings = validate(tmp_path / "nope.json")
        assert len(errors) == 1
        assert warnings == []


class TestDeepMerge:
    def test_nested(self):
        out = deep_merge({"a": {"x": 1, "y": 2}, "l": [1]}, {"a": {"y": 3}, "l": [2]})
        assert out == {"a": {"x": 1, "y": 3}, "l": [2]}

    def test_inputs_untouched(self):
        base = {"a": {"x": 1}}
        deep_merge(base, {"a": {"x": 2}})
        assert base == {"a": {"x": 1}}
