"""SVG line charts of a run directory's time series."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from gapsim.config import SLO_MS  # noqa: E402

_logger = logging.getLogger("gapsim")

METRICS: dict[str, tuple[str, str]] = {
    "latency": ("_p90_observed", "P90 latency (ms)"),
    "replicas": ("_desired", "Replicas"),
    "cpu": ("_cpu_mcores", "CPU (mcores)"),
    "utilization": ("_utilization", "CPU utilization (of request)"),
}

plt.rcParams["svg.hashsalt"] = "gapsim"
plt.rcParams["svg.fonttype"] = "none"


def _slo(run_dir: Path) -> float:
    summary = run_dir / "summary.csv"
    if summary.exists():
        frame = pd.read_csv(summary)
        if "slo_ms" in frame.columns and len(frame):
            return float(frame["slo_ms"].iloc[0])
    return SLO_MS


def series_columns(frame: pd.DataFrame, metric: str) -> list[str]:
    """Columns plotted for a metric; the entry series joins the latency chart."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {', '.join(METRICS)}")
    suffix = METRICS[metric][0]
    cols = [c for c in frame.columns if c.endswith(suffix) and not c.startswith("entry_")]
    if metric == "latency" and "entry_p90_observed" in frame.columns:
        cols.append("entry_p90_observed")
    if not cols:
        raise ValueError(f"time series has no columns for metric {metric!r}")
    return cols


def plot(run_dir: str | Path, metric: str, out: str | Path) -> Path:
    """Render one metric of a run to a deterministic SVG."""
    run_dir = Path(run_dir)
    path = run_dir / "timeseries.csv"
    if not path.exists():
        raise FileNotFoundError(f"no timeseries.csv in {run_dir}")
    frame = pd.read_csv(path)
    if "step_ms" not in frame.columns:
        raise ValueError(f"{path} has no step_ms column")
    cols = series_columns(frame, metric)

    fig, ax = plt.subplots(figsize=(10, 6))
    minutes = frame["step_ms"] / 60_000.0
    for col in cols:
        label = "entry" if col.startswith("entry_") else col.removesuffix(METRICS[metric][0])
        ax.plot(minutes, frame[col], label=label)
    if metric == "latency":
        slo = _slo(run_dir)
        ax.axhline(y=slo, color="r", linestyle="--", label=f"SLO ({slo:g} ms)")
    ax.set_xlabel("Time (minutes)")
    ax.set_ylabel(METRICS[metric][1])
    if len(frame):
        ax.legend()
    ax.grid(True, linestyle="--", alpha=0.7)
    fig.tight_layout()

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    _logger.info(f"Wrote {metric} plot to {out}")
    return out
