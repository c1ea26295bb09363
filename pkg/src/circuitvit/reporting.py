"""Result artifacts: trials/selections/breakdown CSVs, summary JSON, plot data.

All writers iterate in deterministic order and format floats via repr,
so identical experiment results produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .backbone import CircuitSpec
from .evalsel import (
    Budget,
    MetricReport,
    SelectionEntry,
    StrategyBreakdown,
)
from .ingest import ClassIndex

_REFERENCE_RESOURCE = "convnext_reference.json"


def load_reference_scores() -> dict:
    """Bundled fully supervised benchmark scores (read-only)."""
    with resources.files("circuitvit.data").joinpath(_REFERENCE_RESOURCE).open() as f:
        return json.load(f)


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _circuit_cols(circuit: CircuitSpec) -> tuple[str, str]:
    if circuit.is_standard:
        return ("standard", "standard")
    return (str(circuit.entry), str(circuit.exit))


@dataclass
class TrialRow:
    budget: Budget
    circuit: CircuitSpec
    method: str
    repeat_seed: int
    target: str
    report: MetricReport


def write_trials_csv(path: str | Path, rows: list[TrialRow], class_index: ClassIndex) -> None:
    header = ["budget", "circuit_i", "circuit_j", "method", "repeat_seed", "target",
              "accuracy", "macro_f1"] + [f"f1_{name}" for name in class_index.names]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            ci, cj = _circuit_cols(row.circuit)
            writer.writerow(
                [row.budget.label, ci, cj, row.method, row.repeat_seed, row.target,
                 _fmt(row.report.accuracy), _fmt(row.report.macro_f1)]
                + [_fmt(row.report.per_class_f1[name]) for name in class_index.names]
            )


def write_selections_csv(
    path: str | Path,
    selections: dict[str, dict],  # budget label -> {"global": ..., "per_class": ..., scores}
    class_index: ClassIndex,
) -> None:
    header = ["budget", "scope", "class", "circuit_i", "circuit_j", "method",
              "val_score", "test_score"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for budget_label, sel in selections.items():
            entry: SelectionEntry = sel["global"]
            ci, cj = _circuit_cols(entry.circuit)
            writer.writerow([budget_label, "global", "", ci, cj, entry.method,
                             _fmt(entry.score), _fmt(sel["global_test_macro_f1"])])
            for name in class_index.names:
                class_entry: SelectionEntry = sel["per_class"][name]
                ci, cj = _circuit_cols(class_entry.circuit)
                writer.writerow([budget_label, "class", name, ci, cj, class_entry.method,
                                 _fmt(class_entry.score), _fmt(sel["per_class_test_f1"][name])])


def write_breakdown_csv(path: str | Path, breakdowns: dict[str, StrategyBreakdown]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["budget", "baseline_best", "global_best", "unique_best"])
        for budget_label, b in breakdowns.items():
            writer.writerow([budget_label, b.baseline_best, b.global_best, b.unique_best])


def write_plot_global(
    path: str | Path,
    metric: str,  # "macro_f1" | "accuracy"
    per_budget: dict[str, dict[str, float | None]],
    reference: dict,
) -> None:
    """Budget-versus-score series per strategy (figure data: score curves)."""
    ref_value = reference["global"].get(metric)
    columns = ["budget", "standard_baseline", "global_circuit"]
    if metric == "macro_f1":
        # No composite predictor exists across per-class circuits, so a
        # class-specific accuracy is undefined; only F1 carries the column.
        columns.append("class_specific")
    columns.append("convnext_reference")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for budget_label, values in per_budget.items():
            row = [budget_label, _fmt(values["standard_baseline"]), _fmt(values["global_circuit"])]
            if metric == "macro_f1":
                row.append(_fmt(values["class_specific"]))
            row.append(_fmt(ref_value))
            writer.writerow(row)


def write_plot_per_class(
    path: str | Path,
    per_class: dict[str, dict[str, float | None]],
    class_index: ClassIndex,
) -> None:
    """Per-class scores at the maximum budget, sorted by delta to the reference."""
    def order(name: str):
        delta = per_class[name]["delta"]
        return (0, delta, name) if delta is not None else (1, 0.0, name)

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "baseline_f1", "global_circuit_f1", "class_specific_f1",
                         "convnext_reference", "delta"])
        for name in sorted(class_index.names, key=order):
            values = per_class[name]
            writer.writerow([name, _fmt(values["baseline"]), _fmt(values["global_circuit"]),
                             _fmt(values["class_specific"]), _fmt(values["convnext"]),
                             _fmt(values["delta"])])


def write_plot_breakdown(path: str | Path, breakdowns: dict[str, StrategyBreakdown]) -> None:
    write_breakdown_csv(path, breakdowns)


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["config", "budgets", "global", "per_class", "breakdown", "reference"],
    "properties": {
        "config": {"type": "object"},
        "budgets": {"type": "array", "items": {"type": "string"}},
        "global": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["standard_baseline", "global_circuit", "class_specific"],
                "properties": {
                    "standard_baseline": {"$ref": "#/$defs/strategy"},
                    "global_circuit": {"$ref": "#/$defs/strategy"},
                    "class_specific": {
                        "type": "object",
                        "required": ["macro_f1"],
                        "properties": {
                            "macro_f1": {"type": "number"},
                            "delta_macro_f1": {"type": ["number", "null"]},
                        },
                    },
                },
            },
        },
        "per_class": {
            "type": "object",
            "properties": {
                "budget": {"type": "string"},
                "classes": {
                    "type": "object",
                    "additionalProperties": {
                        "type": "object",
                        "required": ["best_method", "circuit", "class_specific_f1"],
                        "properties": {
                            "best_method": {"type": "string"},
                            "circuit": {"type": "string"},
                            "class_specific_f1": {"type": "number"},
                            "global_circuit_f1": {"type": "number"},
                            "baseline_f1": {"type": "number"},
                            "convnext_f1": {"type": ["number", "null"]},
                            "delta": {"type": ["number", "null"]},
                        },
                    },
                },
                "macro": {"type": "object"},
            },
        },
        "breakdown": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["baseline_best", "global_best", "unique_best"],
                "properties": {
                    "baseline_best": {"type": "integer"},
                    "global_best": {"type": "integer"},
                    "unique_best": {"type": "integer"},
                },
            },
        },
        "reference": {"type": "object"},
    },
    "$defs": {
        "strategy": {
            "type": "object",
            "required": ["macro_f1", "accuracy", "circuit", "method"],
            "properties": {
                "macro_f1": {"type": "number"},
                "accuracy": {"type": "number"},
                "circuit": {"type": "string"},
                "method": {"type": "string"},
                "delta_macro_f1": {"type": ["number", "null"]},
            },
        }
    },
}


def write_summary_json(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
