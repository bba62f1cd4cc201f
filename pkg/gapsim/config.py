import os

from dotenv import load_dotenv

load_dotenv()

# Output / logging
OUT_ROOT: str = os.environ.get("GAPSIM_OUT_ROOT", "runs")
LOG_DIR: str = os.environ.get("GAPSIM_LOG_DIR", "logs")
LOG_LEVEL: str = os.environ.get("GAPSIM_LOG_LEVEL", "INFO").upper()

# Per-step conservation/quota checks; raise on the first violation
DEBUG_CHECKS: bool = os.environ.get("GAPSIM_DEBUG_CHECKS", "").lower() in ("1", "true", "yes")

# Parallel compare workers (0 = one per policy)
WORKERS: int = int(os.environ.get("GAPSIM_WORKERS", "0"))

# Simulation clock
STEP_MS: int = 100
SYNC_PERIOD_MS: int = 15_000

# Telemetry windows
UTILIZATION_WINDOW_MS: int = 60_000
LATENCY_WINDOW_MS: int = 60_000

# SLO on end-to-end latency of the entry endpoint
SLO_MS: float = 150.0

# Cluster
MAX_REPLICAS: int = 20
DRAIN_TIMEOUT_MS: int = 10_000
HEALTH_CHECK_COST_MS: float = 10.0
DEFAULT_NODE_CAPACITY_MCORES: int = 8000

# Requests
REQUEST_TIMEOUT_MS: int = 10_000
MAX_QUEUE: int = 100
DEMAND_JITTER: float = 0.10  # +/- fraction when jitter is enabled

# Downscale stabilization for threshold policies
DOWNSCALE_STABILIZATION_MS: int = 300_000
