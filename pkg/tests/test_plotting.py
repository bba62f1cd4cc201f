"""Tests for gapsim.plotting -- SVG output from run directories."""

import pandas as pd
import pytest

from gapsim.plotting import plot, series_columns
from gapsim.runner import run_scenario
from tests.conftest import make_scenario


@pytest.fixture
def run_dir(tmp_path, short_doc):
    """A short finished run."""
    out = tmp_path / "run"
    run_scenario(make_scenario(short_doc), out, duration_ms=30_000)
    return out


class TestSeriesColumns:
    def test_latency_includes_entry(self):
        frame = pd.DataFrame(columns=["step_ms", "a_p90_observed", "a_p90_true", "entry_p90_observed",
                                      "entry_p90_true"])
        assert series_columns(frame, "latency") == ["a_p90_observed", "entry_p90_observed"]

    def test_replicas(self):
        frame = pd.DataFrame(columns=["step_ms", "a_desired", "b_desired", "a_ready"])
        assert series_columns(frame, "replicas") == ["a_desired", "b_desired"]

    def test_unknown_metric(self):
        with pytest.raises(ValueError, match="unknown metric"):
            series_columns(pd.DataFrame(columns=["step_ms"]), "memory")

    def test_no_matching_columns(self):
        with pytest.raises(ValueError):
            series_columns(pd.DataFrame(columns=["step_ms"]), "cpu")


class TestPlot:
    @pytest.mark.parametrize("metric", ["latency", "replicas", "cpu", "utilization"])
    def test_writes_svg(self, run_dir, tmp_path, metric):
        out = plot(run_dir, metric, tmp_path / "plots" / f"{metric}.svg")
        text = out.read_text(encoding="utf-8")
        assert text.lstrip().startswith("<?xml")
        assert "<svg" in text

    def test_deterministic_bytes(self, run_dir, tmp_path):
        a = plot(run_dir, "latency", tmp_path / "a.svg").read_bytes()
        b = plot(run_dir, "latency", tmp_path / "b.svg").read_bytes()
        assert a == b

    def test_slo_line_from_summary(self, run_dir, tmp_path):
        text = plot(run_dir, "latency", tmp_path / "l.svg").read_text(encoding="utf-8")
        assert "SLO (150 ms)" in text

    def test_missing_run(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            plot(tmp_path, "latency", tmp_path / "x.svg")

    def test_missing_step_column(self, tmp_path):
        pd.DataFrame({"a_desired": [1]}).to_csv(tmp_path / "timeseries.csv", index=False)
        with pytest.raises(ValueError, match="step_ms"):
            plot(tmp_path, "replicas", tmp_path / "x.svg")
