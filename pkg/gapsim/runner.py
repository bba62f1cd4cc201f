"""Experiment runner: single runs with their output files, and policy comparisons."""

from __future__ import annotations

import concurrent.futures
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from gapsim.config import DEBUG_CHECKS, WORKERS
from gapsim.display import format_summary, format_table
from gapsim.gaps import format_gap_report, gap_report
from gapsim.scenario import ScenarioConfig
from gapsim.telemetry import RunReport
from gapsim.tick import run

_logger = logging.getLogger("gapsim")

SERVICE_SERIES = ("ready", "desired", "utilization", "cpu_mcores", "p90_observed", "p90_true", "errors")
ENTRY_COLUMNS = ("entry_p90_observed", "entry_p90_true", "cum_violations", "cum_true_violations",
                 "cum_masked_failures", "cum_core_minutes")
DECISION_COLUMNS = ("sync_ms", "service", "current", "target_pre_clamp", "target_actuated", "reason")
POD_COLUMNS = ("step_ms", "pod", "service", "node", "phase", "cpu_mcores", "restarts")
SUMMARY_COLUMNS = ("scenario", "policy", "seed", "slo_ms", "requests", "slo_violations", "true_violations",
                   "masked_failures", "failed_requests", "cpu_core_minutes", "observed_mean_ms",
                   "observed_p90_ms", "true_mean_ms", "true_p90_ms", "quota_exceeded")
COMPARISON_COLUMNS = ("policy", "slo_violations", "cpu_core_minutes", "status")
GAP_COLUMNS = ("gap", "name", "challenge", "category", "phase", "status")


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    """LF endings, '.' decimals, 6 significant digits, empty cells for missing values."""
    frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n", na_rep="")


def timeseries_columns(services: list[str]) -> list[str]:
    cols = ["step_ms"]
    for svc in services:
        cols.extend(f"{svc}_{field}" for field in SERVICE_SERIES)
    cols.extend(ENTRY_COLUMNS)
    return cols


def summary_row(scenario: ScenarioConfig, policy: str, seed: int, report: RunReport) -> dict[str, object]:
    row: dict[str, object] = {
        "scenario": scenario.name,
        "policy": policy,
        "seed": seed,
        "slo_ms": scenario.slo_ms,
        "requests": report.requests,
        "slo_violations": report.slo_violations,
        "true_violations": report.true_violations,
        "masked_failures": report.masked_failures,
        "failed_requests": report.failed_requests,
        "cpu_core_minutes": report.cpu_core_minutes,
        "observed_mean_ms": report.observed_mean_ms,
        "observed_p90_ms": report.observed_p90_ms,
        "true_mean_ms": report.true_mean_ms,
        "true_p90_ms": report.true_p90_ms,
        "quota_exceeded": report.quota_exceeded,
    }
    for svc in scenario.service_names():
        row[f"max_replicas_{svc}"] = report.max_replicas.get(svc, 0)
        row[f"restarts_{svc}"] = report.restarts.get(svc, 0)
        row[f"core_minutes_{svc}"] = report.core_minutes_by_service.get(svc, 0.0)
    return row


def _fmt(value: object) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def format_run_summary(row: dict[str, object]) -> str:
    body = "\n".join(f"  {k}: {_fmt(v)}" for k, v in row.items())
    return format_summary(f"{row['scenario']} / {row['policy']}", body)


def write_gap_report(scenario: ScenarioConfig, out_dir: Path) -> None:
    report = gap_report(scenario)
    (out_dir / "gap_report.txt").write_text(format_gap_report(report) + "\n", encoding="utf-8", newline="\n")
    write_csv(pd.DataFrame(report.records(), columns=list(GAP_COLUMNS)), out_dir / "gap_report.csv")


def write_outputs(scenario: ScenarioConfig, policy: str, seed: int, report: RunReport,
                  out_dir: Path) -> dict[str, object]:
    out_dir.mkdir(parents=True, exist_ok=True)
    services = scenario.service_names()
    write_csv(pd.DataFrame(report.timeseries, columns=timeseries_columns(services)),
              out_dir / "timeseries.csv")
    write_csv(pd.DataFrame(report.decisions, columns=list(DECISION_COLUMNS)), out_dir / "decisions.csv")
    row = summary_row(scenario, policy, seed, report)
    write_csv(pd.DataFrame([row]), out_dir / "summary.csv")
    (out_dir / "summary.txt").write_text(format_run_summary(row) + "\n", encoding="utf-8", newline="\n")
    write_gap_report(scenario, out_dir)
    if scenario.report.pod_series:
        write_csv(pd.DataFrame(report.pod_series, columns=list(POD_COLUMNS)), out_dir / "pods.csv")
    return row


def run_scenario(scenario: ScenarioConfig, out_dir: str | Path, seed: int | None = None,
                 duration_ms: int | None = None, policy: str | None = None,
                 debug_checks: bool = DEBUG_CHECKS) -> RunReport:
    """Run once and write the run directory."""
    run_seed = scenario.seed if seed is None else seed
    name = policy or scenario.autoscaler.name
    report = run(scenario, name, run_seed, duration_ms, debug_checks)
    write_outputs(scenario, name, run_seed, report, Path(out_dir))
    return report


# ---------------------------------------------------------------------------
# Compare
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    policy: str
    slo_violations: int | None
    cpu_core_minutes: float | None
    status: str

    def to_dict(self) -> dict[str, object]:
        return {
            "policy": self.policy,
            "slo_violations": self.slo_violations,
            "cpu_core_minutes": self.cpu_core_minutes,
            "status": self.status,
        }


def _run_one(scenario: ScenarioConfig, policy: str, seed: int, duration_ms: int | None,
             out_dir: str, debug_checks: bool) -> tuple[int, float]:
    report = run_scenario(scenario, out_dir, seed, duration_ms, policy, debug_checks)
    return report.slo_violations, report.cpu_core_minutes


def compare(scenario: ScenarioConfig, policies: list[str], out_dir: str | Path,
            seed: int | None = None, duration_ms: int | None = None,
            workers: int = WORKERS, debug_checks: bool = DEBUG_CHECKS) -> list[ComparisonRow]:
    """Run each policy on the same workload and seed; one row per policy in input order.

    Runs execute in separate processes. A failing policy gets a `failed` row
    and the others still complete.
    """
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_seed = scenario.seed if seed is None else seed
    n_workers = workers if workers > 0 else len(policies)
    rows: list[ComparisonRow] = []
    with concurrent.futures.ProcessPoolExecutor(max_workers=n_workers) as executor:
        futures = [
            executor.submit(_run_one, scenario, p, run_seed, duration_ms,
                            str(out / f"{i:02d}-{p}"), debug_checks)
            for i, p in enumerate(policies)
        ]
        for p, fut in zip(policies, futures):
            try:
                violations, minutes = fut.result()
                rows.append(ComparisonRow(p, violations, minutes, "ok"))
            except Exception as e:
                _logger.error(f"Policy {p} failed: {e}", exc_info=True)
                rows.append(ComparisonRow(p, None, None, "failed"))
    write_csv(pd.DataFrame([r.to_dict() for r in rows], columns=list(COMPARISON_COLUMNS)),
              out / "comparison.csv")
    (out / "comparison.txt").write_text(format_comparison(rows) + "\n", encoding="utf-8", newline="\n")
    return rows


def format_comparison(rows: list[ComparisonRow]) -> str:
    table = format_table(
        ["Policy", "SLO Violations", "CPU Core-Minutes", "Status"],
        [[r.policy, _fmt(r.slo_violations),
          "-" if r.cpu_core_minutes is None or math.isnan(r.cpu_core_minutes) else f"{r.cpu_core_minutes:.2f}",
          r.status] for r in rows],
    )
    return format_summary("comparison", table)
