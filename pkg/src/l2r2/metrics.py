"""Accuracy, macro accuracy over present classes, per-class deltas and report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core_data import MeanStd, ValidationError, format_float

__all__ = [
    "EvalReport",
    "accuracy",
    "macro_accuracy",
    "per_class_accuracy",
    "per_class_delta",
    "evaluate",
    "format_table",
]


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise ValidationError("empty predictions")
    if p.shape != y.shape:
        raise ValidationError(f"{p.size} predictions for {y.size} labels")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def per_class_accuracy(preds, labels, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class accuracy and a presence mask; absent classes have accuracy 0 and present=False."""
    p, y = _pair(preds, labels)
    support = np.bincount(y, minlength=num_classes)[:num_classes]
    hits = np.bincount(y[p == y], minlength=num_classes)[:num_classes]
    present = support > 0
    acc = np.zeros(num_classes)
    acc[present] = hits[present] / support[present]
    return acc, present


def macro_accuracy(preds, labels, num_classes: int) -> float:
    """Mean per-class accuracy; classes missing from ``labels`` are dropped before averaging."""
    acc, present = per_class_accuracy(preds, labels, num_classes)
    return float(acc[present].mean())


def per_class_delta(preds_a, preds_b, labels, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    acc_a, present = per_class_accuracy(preds_a, labels, num_classes)
    acc_b, _ = per_class_accuracy(preds_b, labels, num_classes)
    return np.where(present, acc_a - acc_b, 0.0), present


@dataclass(frozen=True)
class EvalReport:
    micro: float
    macro: float
    per_class: np.ndarray
    present: np.ndarray
    n: int
    classes_present: int

    def as_row(self) -> dict:
        return {
            "n": self.n,
            "micro": self.micro,
            "macro": self.macro,
            "classes_present": self.classes_present,
        }


def evaluate(preds, labels, num_classes: int) -> EvalReport:
    p, y = _pair(preds, labels)
    acc, present = per_class_accuracy(p, y, num_classes)
    return EvalReport(
        micro=float(np.mean(p == y)),
        macro=float(acc[present].mean()),
        per_class=acc,
        present=present,
        n=int(y.size),
        classes_present=int(present.sum()),
    )


def _value(v) -> float:
    return v.mean if isinstance(v, MeanStd) else float(v)


def format_table(
    rows: Mapping[str, Mapping[str, float | MeanStd]],
    baseline: str | None = None,
    fmt: str = "md",
    scale: float = 100.0,
) -> str:
    """Render ``{row_name: {column: value}}`` with signed deltas against ``baseline``.

    Values are multiplied by ``scale`` (percent by default). ``MeanStd`` cells
    render as ``mean ±std``. The csv format emits one line per (row, column).
    """
    if baseline is not None and baseline not in rows:
        raise ValidationError(f"baseline {baseline!r} not among rows {list(rows)}")
    columns: list[str] = []
    for r in rows.values():
        for c in r:
            if c not in columns:
                columns.append(c)
    base = rows[baseline] if baseline is not None else None

    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "column", "mean", "std", "n_runs", "delta"])
        for name, r in rows.items():
            for c in columns:
                if c not in r:
                    continue
                v = r[c]
                std = v.std if isinstance(v, MeanStd) else 0.0
                n = v.n_runs if isinstance(v, MeanStd) else 1
                delta = "" if base is None or c not in base else format_float(_value(v) - _value(base[c]))
                w.writerow([name, c, format_float(_value(v)), format_float(std), n, delta])
        return buf.getvalue()
    if fmt != "md":
        raise ValidationError(f"unknown format {fmt!r} (md|csv)")

    def cell(name: str, c: str) -> str:
        r = rows[name]
        if c not in r:
            return "-"
        v = r[c]
        text = f"{_value(v) * scale:.2f}"
        if isinstance(v, MeanStd) and v.n_runs > 1:
            text += f" ±{v.std * scale:.2f}"
        if base is not None and name != baseline and c in base:
            d = (_value(v) - _value(base[c])) * scale
            text = f"({d:+.2f}) {text}"
        return text

    lines = ["| method | " + " | ".join(columns) + " |", "|---" * (len(columns) + 1) + "|"]
    for name in rows:
        lines.append(f"| {name} | " + " | ".join(cell(name, c) for c in columns) + " |")
    return "\n".join(lines) + "\n"
