"""Per-case metric rows and the aggregated CSV report."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..errors import ManifestError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "case_id",
    "mode",
    "dsc_whole",
    "dsc_base",
    "dsc_mid",
    "dsc_apex",
    "tre_mm",
    "jac_grad_x100",
    "iterations",
    "wall_time_s",
)
NUMERIC_COLUMNS = REPORT_COLUMNS[2:]
SUMMARY_ID = "summary"


class RunRow(BaseModel):
    """Metrics of one case registered in one mode."""

    model_config = ConfigDict(extra="ignore")

    case_id: str
    mode: str
    dsc_whole: float
    dsc_base: float
    dsc_mid: float
    dsc_apex: float
    tre_mm: Optional[float] = None
    jac_grad_x100: float
    iterations: int = 0
    wall_time_s: Optional[float] = None

    @classmethod
    def from_run_dir(cls, run_dir: Union[str, Path]) -> "RunRow":
        """Row from a register output directory (metrics.json plus optional timing.json)."""
        run_dir = Path(run_dir)
        data: Dict[str, Any] = json.loads((run_dir / "metrics.json").read_text())
        timing = run_dir / "timing.json"
        if timing.exists():
            data["wall_time_s"] = json.loads(timing.read_text()).get("wall_time_s")
        return cls.model_validate(data)


class RunReport(BaseModel):
    rows: List[RunRow] = []

    def modes(self) -> List[str]:
        seen: List[str] = []
        for row in self.rows:
            if row.mode not in seen:
                seen.append(row.mode)
        return seen

    def column(self, name: str, mode: Optional[str] = None) -> List[float]:
        """Non-missing values of a numeric column, optionally for one mode."""
        values = [getattr(r, name) for r in self.rows if mode is None or r.mode == mode]
        return [float(v) for v in values if v is not None]


def summarize(values: Sequence[float]) -> Optional[Dict[str, float]]:
    """Mean, median and sample SD (0 for a single value) of a column."""
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(np.mean(arr)), "median": float(np.median(arr)), "sd": sd}


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _format_summary(stats: Optional[Dict[str, float]]) -> str:
    if stats is None:
        return ""
    return f"{stats['mean']:.6g} ({stats['median']:.6g}) ± {stats['sd']:.6g}"


def write_report(report: RunReport, path: Union[str, Path]) -> None:
    """CSV with one row per run and a 'mean (median) ± SD' summary row per mode."""
    if not report.rows:
        raise ManifestError("no runs to report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow([_format(getattr(row, c)) for c in REPORT_COLUMNS])
        for mode in report.modes():
            summary = [SUMMARY_ID, mode]
            summary += [_format_summary(summarize(report.column(c, mode))) for c in NUMERIC_COLUMNS]
            writer.writerow(summary)
    logger.info("Wrote report with %d row(s) to %s", len(report.rows), path)


def collect_runs(runs_dir: Union[str, Path]) -> RunReport:
    """Rows of every metrics.json below ``runs_dir``, in sorted path order."""
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise ManifestError(f"runs directory not found: {runs_dir}")
    rows = [RunRow.from_run_dir(p.parent) for p in sorted(runs_dir.rglob("metrics.json"))]
    if not rows:
        raise ManifestError(f"no metrics.json found below {runs_dir}")
    return RunReport(rows=rows)
