"""
Report documents.

A run produces one JSON report plus delimited-text tables (verdicts,
designs, normality screen) and one plot-data file per candidate model.
Serialization is deterministic: keys are sorted, non-finite numbers become
null and nothing time-dependent is written.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .logging import get_logger
from .oed import DesignEvaluation
from .stats import NormalityScreen, UncertaintyReport

logger = get_logger(__name__)

SCHEMA_VERSION = "1.0"


def to_plain(value: Any) -> Any:
    """Convert nested report values into JSON-safe builtins."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, frozenset, set)):
        items = sorted(value) if isinstance(value, (frozenset, set)) else value
        return [to_plain(v) for v in items]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        number = float(value)
        return number if math.isfinite(number) else None
    return value


@dataclass
class ReportDocument:
    """Results of one pipeline run."""

    reports: list[UncertaintyReport]
    designs: list[DesignEvaluation] = field(default_factory=list)
    selected: DesignEvaluation | None = None
    greedy: DesignEvaluation | None = None
    normality: NormalityScreen | None = None
    friction: dict[str, dict[str, Any]] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)
    sensor_names: list[str] = field(default_factory=list)
    plot_rows: dict[str, list[dict[str, Any]]] = field(default_factory=dict)

    @property
    def verdicts(self) -> dict[str, int]:
        return {report.model_id: report.verdict for report in self.reports}

    def to_dict(self) -> dict[str, Any]:
        return to_plain(
            {
                "schema_version": SCHEMA_VERSION,
                "provenance": self.provenance,
                "sensors": self.sensor_names,
                "design": {
                    "selected": None if self.selected is None else self.selected.to_dict(),
                    "greedy": None if self.greedy is None else self.greedy.to_dict(),
                    "table": [
                        {**d.to_dict(), "label": d.label} for d in self.designs
                    ],
                },
                "normality": None if self.normality is None else self.normality.to_dict(),
                "friction": self.friction,
                "models": [report.to_dict() for report in self.reports],
                "verdicts": self.verdicts,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def verdict_table(self) -> pd.DataFrame:
        rows = [
            {
                "model": report.model_id,
                "scenario": result.scenario_id,
                "mahalanobis_sq": result.mahalanobis_sq,
                "alpha_min": result.alpha_min,
                "threshold": result.threshold,
                "rejected": int(result.rejected),
            }
            for report in self.reports
            for result in report.scenarios
        ]
        return pd.DataFrame(
            rows,
            columns=[
                "model",
                "scenario",
                "mahalanobis_sq",
                "alpha_min",
                "threshold",
                "rejected",
            ],
        )

    def design_table(self) -> pd.DataFrame:
        rows = [
            {
                "omega": d.label,
                "n_active": d.n_active,
                "feasible": int(d.feasible),
                "psi_a": d.psi_a,
                "psi_d": d.psi_d,
                "psi_e": d.psi_e,
                "reason": d.reason or "",
            }
            for d in self.designs
        ]
        return pd.DataFrame(
            rows,
            columns=["omega", "n_active", "feasible", "psi_a", "psi_d", "psi_e", "reason"],
        )

    def normality_table(self) -> pd.DataFrame:
        """Per-sensor W, p-value and sigma estimate, sigma in micrometers."""
        results = [] if self.normality is None else self.normality.results
        rows = [
            {
                "sensor": (
                    self.sensor_names[r.sensor]
                    if r.sensor < len(self.sensor_names)
                    else str(r.sensor)
                ),
                "n": r.n,
                "w": r.w,
                "p_value": r.p_value,
                "sigma_hat_um": r.sigma_hat * 1e6,
                "rejected": int(r.rejected),
            }
            for r in results
        ]
        return pd.DataFrame(
            rows, columns=["sensor", "n", "w", "p_value", "sigma_hat_um", "rejected"]
        )

    def write(self, out_dir: str | Path) -> list[Path]:
        """Write the report and all tables; returns the written paths."""
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        written = []

        report_path = target / "report.json"
        report_path.write_text(self.to_json(), encoding="utf-8")
        written.append(report_path)

        tables = {
            "verdicts.csv": self.verdict_table(),
            "designs.csv": self.design_table(),
            "normality.csv": self.normality_table(),
        }
        for model_id, rows in sorted(self.plot_rows.items()):
            tables[f"plot_{model_id}.csv"] = pd.DataFrame(rows)
        for name, frame in tables.items():
            path = target / name
            frame.to_csv(path, index=False, lineterminator="\n")
            written.append(path)

        logger.info("Report written", out_dir=str(target), files=len(written))
        return written
