"""Per-task precision/recall over labeled records, CSV output, reports.

Unknown labels (-1) are excluded from every count. Zero-denominator cases
return 0.0 and set the degenerate flag rather than raising, since heavily
imbalanced evaluation splits hit them routinely.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import UNKNOWN

__all__ = [
    "TaskMetrics",
    "confusion",
    "precision_recall",
    "f1_score",
    "metrics_for_run",
    "write_metrics_csv",
    "read_metrics_csv",
    "render_report",
    "write_report",
    "TABLE_TASK_ORDER",
]

CSV_COLUMNS = ("task", "run", "precision", "recall", "tp", "fp", "fn", "tn",
               "n_labeled", "degenerate")

# canonical presentation order for the reference task set
TABLE_TASK_ORDER = (
    "Fracture", "Lung Lesion", "Enlarged CM", "Consolidation", "Pneumonia",
    "Atelectasis", "Lung Opacity", "Pneumothorax", "Edema", "Cardiomegaly",
    "Length of stay", "48h Mortality",
)


@dataclass
class TaskMetrics:
    task: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    n_labeled: int
    degenerate: bool


def confusion(y_pred, y_true) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) over entries whose true label is 0 or 1."""
    pred = np.asarray(y_pred).astype(np.int64)
    true = np.asarray(y_true).astype(np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match labels {true.shape}")
    labeled = true != UNKNOWN
    p, t = pred[labeled], true[labeled]
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    return tp, fp, fn, tn


def precision_recall(y_pred, y_true, task: str = "") -> TaskMetrics:
    tp, fp, fn, tn = confusion(y_pred, y_true)
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return TaskMetrics(task=task, tp=tp, fp=fp, fn=fn, tn=tn,
                       precision=precision, recall=recall,
                       n_labeled=tp + fp + fn + tn, degenerate=degenerate)


def f1_score(m: TaskMetrics) -> float:
    if m.precision + m.recall == 0.0:
        return 0.0
    return 2.0 * m.precision * m.recall / (m.precision + m.recall)


def metrics_for_run(y_pred, labels, task_names) -> list[TaskMetrics]:
    pred = np.asarray(y_pred)
    true = np.asarray(labels)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ValueError("need matching (records, tasks) prediction and label matrices")
    if pred.shape[1] != len(task_names):
        raise ValueError("task name count does not match the matrices")
    return [precision_recall(pred[:, k], true[:, k], task=name)
            for k, name in enumerate(task_names)]


def write_metrics_csv(path, run: str, metrics: list[TaskMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for m in metrics:
            writer.writerow([m.task, run, repr(m.precision), repr(m.recall),
                             m.tp, m.fp, m.fn, m.tn, m.n_labeled, int(m.degenerate)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({
                "task": row["task"],
                "run": row["run"],
                "precision": float(row["precision"]),
                "recall": float(row["recall"]),
            })
    if not rows:
        raise ValueError(f"{path}: empty metrics file")
    return rows


def _ordered_tasks(tasks: list[str]) -> list[str]:
    if set(tasks) == set(TABLE_TASK_ORDER):
        return list(TABLE_TASK_ORDER)
    return tasks


def render_report(runs: list[tuple[str, list[dict]]]) -> tuple[str, str]:
    """Merge runs into one table: rows are tasks, each run contributes a
    precision and a recall column, values at 3 decimals. Returns (csv_text,
    aligned_text); every run must cover the same task list.
    """
    if not runs:
        raise ValueError("no runs to report")
    base_tasks = [r["task"] for r in runs[0][1]]
    table: dict[str, dict[str, tuple[float, float]]] = {t: {} for t in base_tasks}
    for run_name, rows in runs:
        tasks = [r["task"] for r in rows]
        if sorted(tasks) != sorted(base_tasks):
            raise ValueError(
                f"run {run_name!r} covers tasks {sorted(tasks)}, expected {sorted(base_tasks)}")
        for r in rows:
            table[r["task"]][run_name] = (r["precision"], r["recall"])
    order = _ordered_tasks(base_tasks)
    run_names = [name for name, _ in runs]

    buf = io.StringIO()
    writer = csv.writer(buf)
    header = ["task"]
    for name in run_names:
        header += [f"{name}_precision", f"{name}_recall"]
    writer.writerow(header)
    for task in order:
        row = [task]
        for name in run_names:
            p, r = table[task][name]
            row += [f"{p:.3f}", f"{r:.3f}"]
        writer.writerow(row)
    csv_text = buf.getvalue()

    width = max(len("task"), *(len(t) for t in order))
    cols = []
    for name in run_names:
        cols += [f"{name} prec", f"{name} rec"]
    lines = ["  ".join(["task".ljust(width)] + [c.rjust(max(len(c), 6)) for c in cols])]
    for task in order:
        cells = [task.ljust(width)]
        for name, col_p, col_r in zip(run_names, cols[0::2], cols[1::2]):
            p, r = table[task][name]
            cells.append(f"{p:.3f}".rjust(max(len(col_p), 6)))
            cells.append(f"{r:.3f}".rjust(max(len(col_r), 6)))
        lines.append("  ".join(cells))
    return csv_text, "\n".join(lines) + "\n"


def write_report(out_path, runs: list[tuple[str, list[dict]]]) -> str:
    """Write the CSV table to out_path and its aligned twin next to it."""
    csv_text, aligned = render_report(runs)
    out = Path(out_path)
    out.write_text(csv_text)
    out.with_suffix(out.suffix + ".txt").write_text(aligned)
    return aligned
