import json
from enum import Enum
from typing import Any

from tabulate import tabulate

from stockrater.evaluation import EvaluationReport
from stockrater.labeler import LabelMode


class OutputFormat(str, Enum):
    table = "table"
    json = "json"
    plain = "plain"


def score_rows(report: EvaluationReport) -> list[dict[str, Any]]:
    """One row per (method, label mode) with the MAE at each horizon and the composite error."""
    rows = []
    for method, scores in sorted(report.methods.items()):
        horizons = sorted({h for h, _ in scores.per_horizon})
        for mode in LabelMode:
            row: dict[str, Any] = {"method": method, "mode": mode.value}
            for horizon in horizons:
                score = scores.per_horizon.get((horizon, mode))
                row[f"mae_{horizon}m"] = None if score is None else round(score.mae, 3)
            composite = scores.composite.get(mode)
            row["composite"] = None if composite is None else round(composite, 3)
            row["n"] = sum(s.n for (_, m), s in scores.per_horizon.items() if m == mode)
            rows.append(row)
    return rows


# noinspection PyShadowingBuiltins
def format_scores(report: EvaluationReport, format: OutputFormat) -> str:
    rows = score_rows(report)
    if format == OutputFormat.json:
        return json.dumps(rows, indent=2)
    if format == OutputFormat.plain:
        lines = [",".join(rows[0].keys())] if rows else []
        lines += [",".join("" if v is None else str(v) for v in row.values()) for row in rows]
        return "\n".join(lines)
    return tabulate(rows, headers="keys", tablefmt="grid", missingval="N/A")
