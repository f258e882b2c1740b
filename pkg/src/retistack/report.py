"""Metrics, four-condition ablation, table rendering, and curve emission."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSplits
from .engine import EpochRecord, TrainConfig
from .stacking import run_pipeline

# Ablation conditions in table row order.
CONDITIONS = ("none", "gender", "both", "age")
CONDITION_LABELS = {
    "none": "w/o Age & Gender",
    "gender": "w/i Gender",
    "both": "w/i Age & Gender",
    "age": "w/i Age",
}


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts and derived metrics; positive class = diabetic = 1."""

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float | None
    recall: float | None


def compute_metrics(predictions, labels) -> MetricsReport:
    """Confusion-matrix metrics; undefined precision/recall become None, not 0."""
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ReportError(
            f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels"
        )
    if not predictions:
        raise ReportError("empty prediction list")
    tp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 0)
    tn = sum(1 for p, y in zip(predictions, labels) if p == 0 and y == 0)
    fn = sum(1 for p, y in zip(predictions, labels) if p == 0 and y == 1)
    return MetricsReport(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=(tp + tn) / (tp + fp + tn + fn),
        precision=tp / (tp + fp) if (tp + fp) > 0 else None,
        recall=tp / (tp + fn) if (tp + fn) > 0 else None,
    )


def row_average(accuracies) -> float:
    """Arithmetic mean of per-backbone accuracies (the tables' Average column)."""
    accuracies = list(accuracies)
    if not accuracies:
        raise ReportError("cannot average an empty accuracy list")
    return sum(accuracies) / len(accuracies)


def stage_diff(stage1_avg: float, stage2_acc: float) -> float:
    """Ensemble gain: stage-2 accuracy minus the stage-1 average."""
    return stage2_acc - stage1_avg


@dataclass
class ConditionResult:
    condition: str
    base_accuracies: list[float]
    stage1_average: float
    stage2_accuracy: float
    diff: float


@dataclass
class AblationResult:
    backbone_names: list[str]
    conditions: dict[str, ConditionResult] = field(default_factory=dict)

    def require_complete(self):
        missing = [c for c in CONDITIONS if c not in self.conditions]
        if missing:
            raise ReportError(f"ablation result incomplete, missing conditions: {missing}")


def run_ablation(
    splits: DatasetSplits,
    backbone_names: list[str],
    cfg: TrainConfig,
    image_side: int,
    augment_train: bool = False,
    head_max_epochs: int = 100,
    head_lr: float = 1.0,
) -> tuple[AblationResult, dict[str, dict[str, list[EpochRecord]]]]:
    """Run the full pipeline once per condition with identical splits and seeds.

    Only the metadata mode differs across conditions, so accuracy
    differences are attributable to the metadata alone.
    """
    result = AblationResult(backbone_names=list(backbone_names))
    traces: dict[str, dict[str, list[EpochRecord]]] = {}
    id_sets = None
    for condition in CONDITIONS:
        ids = (
            tuple(r.patient_id for r in splits.train1),
            tuple(r.patient_id for r in splits.train2),
            tuple(r.patient_id for r in splits.test),
        )
        if id_sets is None:
            id_sets = ids
        elif ids != id_sets:
            raise ReportError("split membership changed between ablation conditions")
        res = run_pipeline(
            splits,
            backbone_names,
            condition,
            cfg,
            image_side,
            augment_train,
            head_max_epochs,
            head_lr,
        )
        avg = row_average(res.base_test_accuracies)
        result.conditions[condition] = ConditionResult(
            condition=condition,
            base_accuracies=res.base_test_accuracies,
            stage1_average=avg,
            stage2_accuracy=res.ensemble_test_accuracy,
            diff=stage_diff(avg, res.ensemble_test_accuracy),
        )
        traces[condition] = res.traces
    return result, traces


def format_cell(value: float) -> str:
    """Render at up to 4 decimals, trailing zeros trimmed (0.6780 -> 0.678)."""
    s = f"{value:.4f}".rstrip("0").rstrip(".")
    return s if s not in ("", "-") else "0"


def render_tables(result: AblationResult) -> tuple[str, str]:
    """Render the per-model and ensemble accuracy tables as aligned text grids."""
    result.require_complete()
    names = result.backbone_names
    rows1 = [["Condition", *names, "Average"]]
    for c in CONDITIONS:
        r = result.conditions[c]
        rows1.append(
            [CONDITION_LABELS[c]]
            + [format_cell(a) for a in r.base_accuracies]
            + [format_cell(r.stage1_average)]
        )
    rows2 = [["Condition", "Training1", "Training2", "Diff."]]
    for c in CONDITIONS:
        r = result.conditions[c]
        rows2.append(
            [
                CONDITION_LABELS[c],
                format_cell(r.stage1_average),
                format_cell(r.stage2_accuracy),
                format_cell(r.diff),
            ]
        )

    def grid(rows):
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        return "\n".join(lines) + "\n"

    return grid(rows1), grid(rows2)


def write_table_csvs(result: AblationResult, table1_path, table2_path) -> None:
    """Machine-readable tables with the fixed headers; full float precision."""
    result.require_complete()
    with Path(table1_path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["condition", *result.backbone_names, "average"])
        for c in CONDITIONS:
            r = result.conditions[c]
            w.writerow([c, *[repr(a) for a in r.base_accuracies], repr(r.stage1_average)])
    with Path(table2_path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["condition", "training1", "training2", "diff"])
        for c in CONDITIONS:
            r = result.conditions[c]
            w.writerow(
                [c, repr(r.stage1_average), repr(r.stage2_accuracy), repr(r.diff)]
            )


def ablation_to_dict(result: AblationResult) -> dict:
    result.require_complete()
    return {
        "backbone_names": result.backbone_names,
        "conditions": {
            c: {
                "base_accuracies": r.base_accuracies,
                "stage1_average": r.stage1_average,
                "stage2_accuracy": r.stage2_accuracy,
                "diff": r.diff,
            }
            for c, r in result.conditions.items()
        },
    }


def ablation_from_dict(d: dict) -> AblationResult:
    result = AblationResult(backbone_names=list(d["backbone_names"]))
    for c, r in d["conditions"].items():
        result.conditions[c] = ConditionResult(
            condition=c,
            base_accuracies=list(r["base_accuracies"]),
            stage1_average=r["stage1_average"],
            stage2_accuracy=r["stage2_accuracy"],
            diff=r["diff"],
        )
    return result


def ablation_from_tables(
    backbone_names: list[str],
    base_accuracies: dict[str, list[float]],
    stage2_accuracies: dict[str, float],
) -> AblationResult:
    """Build an AblationResult from externally supplied accuracy tables.

    Derived columns (averages, diffs) are recomputed, never taken on trust.
    """
    result = AblationResult(backbone_names=list(backbone_names))
    for c in CONDITIONS:
        accs = base_accuracies[c]
        avg = row_average(accs)
        s2 = stage2_accuracies[c]
        result.conditions[c] = ConditionResult(
            condition=c,
            base_accuracies=list(accs),
            stage1_average=avg,
            stage2_accuracy=s2,
            diff=stage_diff(avg, s2),
        )
    return result


def metadata_gain(result: AblationResult, condition: str = "both") -> float:
    """Stage-2 accuracy gain of a metadata condition over the no-metadata run."""
    result.require_complete()
    return (
        result.conditions[condition].stage2_accuracy
        - result.conditions["none"].stage2_accuracy
    )


def stage1_gain(result: AblationResult, condition: str = "both") -> float:
    """Stage-1 average gain of a metadata condition over the no-metadata run."""
    result.require_complete()
    return (
        result.conditions[condition].stage1_average
        - result.conditions["none"].stage1_average
    )


def emit_curves(
    traces: dict[str, dict[str, list[EpochRecord]]],
    result: AblationResult,
    out_dir: str | Path,
) -> list[Path]:
    """Write per-model epoch,loss,accuracy,lr series and the final-accuracy summary."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create curve directory {out_dir}: {e}") from e
    written = []
    for condition, by_model in traces.items():
        for model_name, trace in by_model.items():
            path = out_dir / f"{condition}_{model_name}.csv"
            with path.open("w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(["epoch", "loss", "accuracy", "lr"])
                for rec in trace:
                    w.writerow([rec.epoch, repr(rec.loss), repr(rec.accuracy), repr(rec.lr)])
            written.append(path)
    result.require_complete()
    summary = out_dir / "final_accuracy_by_condition.csv"
    with summary.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["condition", "stage1_average", "stage2_accuracy"])
        for c in CONDITIONS:
            r = result.conditions[c]
            w.writerow([c, repr(r.stage1_average), repr(r.stage2_accuracy)])
    written.append(summary)
    return written
