import datetime
import logging
from pathlib import Path

from gapsim.config import LOG_DIR, LOG_LEVEL

SEPARATOR = "=" * 60

_logger = logging.getLogger("gapsim")


def init_logging(log_dir: str | Path = LOG_DIR) -> Path:
    """Send the gapsim logger to a timestamped file. Returns the log path."""
    logs = Path(log_dir)
    logs.mkdir(parents=True, exist_ok=True)
    log_path = logs / f"{datetime.datetime.now().strftime('%Y-%m-%d_%H-%M-%S')}.log"
    logging.basicConfig(
        filename=str(log_path),
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    return log_path


def _safe_print(msg: str) -> None:
    """Print that silently does nothing when stdout is unavailable."""
    _logger.info(msg)
    try:
        print(msg)
    except Exception:
        pass


def format_summary(title: str, body: str) -> str:
    """Frame a report body with a header and footer."""
    return (
        f"{SEPARATOR}\n"
        f"  GAPSIM -- {title}\n"
        f"{SEPARATOR}\n"
        f"{body}\n"
        f"{SEPARATOR}"
    )


def format_table(header: list[str], rows: list[list[str]]) -> str:
    """Left-aligned text table with a dashed rule under the header."""
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [" | ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip()]
    lines.append("-+-".join("-" * w for w in widths))
    for row in rows:
        lines.append(" | ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    return "\n".join(lines)


def _ts() -> str:
    return datetime.datetime.now().strftime("%H:%M:%S")


def print_status(message: str) -> None:
    """Print a status message."""
    _safe_print(f"[GAPSIM {_ts()}] {message}")


def print_error(message: str) -> None:
    """Print an error message."""
    _safe_print(f"[GAPSIM ERROR {_ts()}] {message}")
