"""Write run outputs: event CSVs, summary JSON, aggregates and plot data."""

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional

import pandas as pd

from .events import EVENT_COLUMNS, StepEvent, events_to_rows
from .metrics import DiagnosticsReport
from .models import AggregateSummary, RunStatus, RunSummary
from .utils import atomic_write_text

logger = logging.getLogger(__name__)

PLOTDATA_COLUMNS = ["dataset", "method", "seed", "sweep_var", "sweep_value", "coverage", "mean_length"]


class NoSummariesError(FileNotFoundError):
    """Raised when a results directory holds no summary.json files."""
    pass


def cell_dir(out_dir: Path, point_label: str, dataset: str, method: str, seed: int) -> Path:
    return Path(out_dir) / point_label / dataset / method / f"seed{seed}"


def _dump_json(data: dict) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2, default=str, allow_nan=False) + "\n"


def write_events(events: Iterable[StepEvent], path: Path) -> str:
    """Write per-step event rows; infinite quantiles and lengths appear as 'inf'.

    Units differ by column: alpha_t, score, quantile and inversion_residual are
    in the standardized units the calibrator runs in, while mean_interval_length
    is in target units. For OCP and AOCP it equals 2 * quantile * mean(target_scale).
    """
    frame = pd.DataFrame(events_to_rows(list(events)), columns=EVENT_COLUMNS)
    return atomic_write_text(Path(path), frame.to_csv(index=False, lineterminator="\n"))


def write_summary(summary: RunSummary, path: Path) -> str:
    """Write a RunSummary as JSON.

    Returns the path of the written file.
    """
    return atomic_write_text(Path(path), _dump_json(summary.to_json_dict()))


def write_aggregate(aggregate: AggregateSummary, path: Path) -> str:
    return atomic_write_text(Path(path), _dump_json(aggregate.to_json_dict()))


def write_diagnostics(report: DiagnosticsReport, path: Path) -> str:
    return atomic_write_text(Path(path), _dump_json(report.to_json_dict()))


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

def _read_summary(path: Path) -> Optional[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Skipping unreadable summary {path}: {e}")
        return None


def collect_plotdata(results_dir: Path) -> pd.DataFrame:
    """Tidy frame with one row per completed (sweep point, dataset, method, seed) cell.

    Failed or unreadable cells are omitted with a warning.
    """
    results_dir = Path(results_dir)
    paths = sorted(results_dir.rglob("summary.json")) if results_dir.is_dir() else []
    if not paths:
        raise NoSummariesError(f"No summary.json files under {results_dir}")

    rows: List[dict] = []
    for path in paths:
        data = _read_summary(path)
        if data is None:
            continue
        if data.get("status") != RunStatus.COMPLETED.value:
            logger.warning(
                f"Omitting {data.get('method')} seed {data.get('seed')} ({path.parent}): "
                f"status={data.get('status')} {data.get('error_message') or ''}".rstrip()
            )
            continue
        sweep = data.get("sweep") or {}
        rows.append(
            {
                "dataset": data["dataset"],
                "method": data["method"],
                "seed": data["seed"],
                "sweep_var": sweep.get("var") or "",
                "sweep_value": sweep.get("value"),
                "coverage": data["coverage"],
                "mean_length": float(data["mean_length"]) if data["mean_length"] is not None else None,
            }
        )

    frame = pd.DataFrame(rows, columns=PLOTDATA_COLUMNS)
    return frame.sort_values(["dataset", "sweep_var", "sweep_value", "method", "seed"], kind="stable").reset_index(
        drop=True
    )


def emit_plotdata(results_dir: Path, out_path: Optional[Path] = None) -> str:
    """Write the long-format plot CSV (9 significant digits, '.' decimal).

    Returns the path of the written file.
    """
    frame = collect_plotdata(results_dir)
    target = Path(out_path) if out_path else Path(results_dir) / "plotdata.csv"
    text = frame.to_csv(index=False, float_format="%.9g", lineterminator="\n")
    path = atomic_write_text(target, text)
    logger.info(f"Plot data: {len(frame)} rows -> {path}")
    return path
