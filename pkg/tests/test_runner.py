"""Tests for gapsim.runner -- run directories, CSV format and policy comparison."""

import pandas as pd
import pytest

from gapsim.runner import (
    COMPARISON_COLUMNS,
    DECISION_COLUMNS,
    GAP_COLUMNS,
    POD_COLUMNS,
    SUMMARY_COLUMNS,
    ComparisonRow,
    compare,
    format_comparison,
    run_scenario,
    timeseries_columns,
    write_csv,
)
from tests.conftest import make_scenario

RUN_FILES = ("timeseries.csv", "decisions.csv", "summary.csv", "summary.txt", "gap_report.txt", "gap_report.csv")


def _header(path):
    return path.read_text(encoding="utf-8").splitlines()[0].split(",")


# ---------------------------------------------------------------------------
# CSV format
# ---------------------------------------------------------------------------

class TestWriteCsv:
    def test_format(self, tmp_path):
        path = tmp_path / "x.csv"
        write_csv(pd.DataFrame([{"a": 1.0 / 3.0, "b": None, "c": 7}]), path)
        assert path.read_bytes() == b"a,b,c\n0.333333,,7\n"

    def test_timeseries_columns(self):
        assert timeseries_columns(["a"]) == [
            "step_ms", "a_ready", "a_desired", "a_utilization", "a_cpu_mcores", "a_p90_observed",
            "a_p90_true", "a_errors", "entry_p90_observed", "entry_p90_true", "cum_violations",
            "cum_true_violations", "cum_masked_failures", "cum_core_minutes",
        ]


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------

class TestRunScenario:
    def test_writes_run_directory(self, tmp_path, short_doc):
        scenario = make_scenario(short_doc)
        run_scenario(scenario, tmp_path / "run")
        out = tmp_path / "run"
        for name in RUN_FILES:
            assert (out / name).exists()
        assert not (out / "pods.csv").exists()
        assert _header(out / "timeseries.csv") == timeseries_columns(scenario.service_names())
        assert _header(out / "decisions.csv") == list(DECISION_COLUMNS)
        assert _header(out / "gap_report.csv") == list(GAP_COLUMNS)
        summary = _header(out / "summary.csv")
        assert summary[:len(SUMMARY_COLUMNS)] == list(SUMMARY_COLUMNS)
        assert "max_replicas_carts" in summary
        assert "core_minutes_front-end" in summary

    def test_summary_values(self, tmp_path, short_doc):
        scenario = make_scenario(short_doc)
        report = run_scenario(scenario, tmp_path, seed=3, policy="none")
        frame = pd.read_csv(tmp_path / "summary.csv")
        assert frame["policy"].iloc[0] == "none"
        assert frame["seed"].iloc[0] == 3
        assert frame["requests"].iloc[0] == report.requests
        assert "baseline / none" in (tmp_path / "summary.txt").read_text(encoding="utf-8")

    def test_pod_series(self, tmp_path, short_doc):
        short_doc["report"] = {"pod_series": True}
        run_scenario(make_scenario(short_doc), tmp_path, duration_ms=15_000)
        frame = pd.read_csv(tmp_path / "pods.csv")
        assert list(frame.columns) == list(POD_COLUMNS)
        assert len(frame) == 3

    def test_byte_identical_reruns(self, tmp_path, short_doc):
        scenario = make_scenario(short_doc)
        run_scenario(scenario, tmp_path / "a")
        run_scenario(scenario, tmp_path / "b")
        for name in RUN_FILES:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_lf_line_endings(self, tmp_path, short_doc):
        run_scenario(make_scenario(short_doc), tmp_path, duration_ms=15_000)
        assert b"\r\n" not in (tmp_path / "timeseries.csv").read_bytes()


# ---------------------------------------------------------------------------
# Compare
# ---------------------------------------------------------------------------

class TestCompare:
    def test_needs_two_policies(self, tmp_path, scenario):
        with pytest.raises(ValueError):
            compare(scenario, ["khpa"], tmp_path)

    def test_rows_in_input_order(self, tmp_path, short_doc):
        rows = compare(make_scenario(short_doc), ["none", "khpa"], tmp_path, duration_ms=15_000, workers=2)
        assert [r.policy for r in rows] == ["none", "khpa"]
        assert all(r.status == "ok" for r in rows)
        assert (tmp_path / "00-none" / "summary.csv").exists()
        assert (tmp_path / "01-khpa" / "summary.csv").exists()
        assert _header(tmp_path / "comparison.csv") == list(COMPARISON_COLUMNS)

    def test_failed_policy_isolated(self, tmp_path, short_doc):
        rows = compare(make_scenario(short_doc), ["none", "bogus"], tmp_path, duration_ms=15_000, workers=1)
        assert [r.status for r in rows] == ["ok", "failed"]
        assert rows[1].slo_violations is None
        frame = pd.read_csv(tmp_path / "comparison.csv")
        assert list(frame["status"]) == ["ok", "failed"]

    def test_format_comparison(self):
        text = format_comparison([ComparisonRow("khpa", 12, 3.14159, "ok"),
                                  ComparisonRow("heat", None, None, "failed")])
        assert "khpa" in text and "3.14" in text
        assert "failed" in text
