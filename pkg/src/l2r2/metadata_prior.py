"""Class-conditional priors over a categorical metadata column.

The classifier output is treated as independent of the metadata given the
class, so ``p(k | x, m) ∝ p(k | x) p(m | k)``. Dividing by ``p(m)`` would change
reported probabilities but not the argmax; no extra ``p(k)`` factor is applied.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_data import ValidationError, format_float

__all__ = ["PriorTable", "estimate_priors", "reweight", "reweight_batch", "save_priors", "load_priors"]


@dataclass(frozen=True)
class PriorTable:
    column: str
    categories: tuple[str, ...]
    counts: np.ndarray
    probs: np.ndarray
    smoothing: float = 1.0

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def likelihood(self, value: str | None) -> np.ndarray | None:
        """``p(value | k)`` for every class, or None for a missing or unseen value."""
        if value is None or value not in self.categories:
            return None
        return self.probs[:, self.categories.index(value)]


def estimate_priors(
    labels, values: Sequence[str | None], num_classes: int, column: str = "metadata", smoothing: float = 1.0
) -> PriorTable:
    """Tally (class, value) counts on training rows and add ``smoothing`` to every cell."""
    y = np.asarray(labels, dtype=np.int64)
    if len(values) != len(y):
        raise ValidationError(f"{len(values)} metadata values for {len(y)} labels")
    if smoothing <= 0:
        raise ValidationError("smoothing must be positive")
    seen = [(int(k), v) for k, v in zip(y, values) if v is not None]
    if not seen:
        raise ValidationError(f"metadata column {column!r}: all values missing")
    categories = tuple(sorted({v for _, v in seen}))
    col = {c: j for j, c in enumerate(categories)}
    counts = np.zeros((num_classes, len(categories)), dtype=np.int64)
    for k, v in seen:
        counts[k, col[v]] += 1
    smoothed = counts + smoothing
    probs = smoothed / smoothed.sum(axis=1, keepdims=True)
    return PriorTable(column, categories, counts, probs, smoothing)


def reweight(probs, value: str | None, priors: PriorTable) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    lik = priors.likelihood(value)
    if lik is None:
        return p.copy()
    out = p * lik
    return out / out.sum()


def reweight_batch(probs, values: Sequence[str | None], priors: PriorTable) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if len(values) != p.shape[0]:
        raise ValidationError(f"{len(values)} metadata values for {p.shape[0]} rows")
    return np.vstack([reweight(row, v, priors) for row, v in zip(p, values)]) if len(p) else p.copy()


def save_priors(path: str | Path, priors: PriorTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "value", "count", "prob"])
        for k in range(priors.num_classes):
            for j, c in enumerate(priors.categories):
                w.writerow([k, c, int(priors.counts[k, j]), format_float(priors.probs[k, j])])


def load_priors(path: str | Path, column: str = "metadata") -> PriorTable:
    with Path(path).open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValidationError(f"{path}: empty prior table")
    categories = tuple(dict.fromkeys(r["value"] for r in rows))
    C = max(int(r["class"]) for r in rows) + 1
    counts = np.zeros((C, len(categories)), dtype=np.int64)
    probs = np.zeros((C, len(categories)))
    for r in rows:
        k, j = int(r["class"]), categories.index(r["value"])
        counts[k, j] = int(r["count"])
        probs[k, j] = float(r["prob"])
    return PriorTable(column, categories, counts, probs)
