"""Fusion without ground-truth prompts: rescore the FULL model's top-k classes.

Each candidate class ``i_j`` prompts the detector once; the FG (and BG) model
is run on that decomposition and only its logit at class ``i_j`` is kept.
The kept values are summed with the FULL logits at the candidates and the
best candidate wins.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np

from .calibration import softmax
from .core_data import ValidationError, format_float
from .fusion import BLENDED, FusionPrediction
from .metrics import accuracy

__all__ = [
    "CandidateSet",
    "build_candidates",
    "gather_candidates",
    "aggregate",
    "aggregate_all",
    "sweep_k",
    "load_candidates",
    "save_candidates",
    "save_sweep",
    "DEFAULT_K",
]

DEFAULT_K = 5
Mode = Literal["three_way", "two_way"]


@dataclass(frozen=True)
class CandidateSet:
    sample_id: str
    candidates: tuple[int, ...]
    z_full: np.ndarray
    z_fg: np.ndarray
    z_bg: np.ndarray
    fallback_fg: tuple[bool, ...] = ()
    fallback_bg: tuple[bool, ...] = ()

    def __post_init__(self):
        k = len(self.candidates)
        if k == 0:
            raise ValidationError(f"{self.sample_id!r}: empty candidate list")
        if len(set(self.candidates)) != k:
            raise ValidationError(f"{self.sample_id!r}: duplicate candidates {self.candidates}")
        for name in ("z_full", "z_fg", "z_bg"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (k,):
                raise ValidationError(f"{self.sample_id!r}: {name} has shape {v.shape}, expected ({k},)")
            object.__setattr__(self, name, v)
        for name in ("fallback_fg", "fallback_bg"):
            flags = tuple(bool(f) for f in getattr(self, name)) or (False,) * k
            if len(flags) != k:
                raise ValidationError(f"{self.sample_id!r}: {name} has {len(flags)} flags for {k} candidates")
            object.__setattr__(self, name, flags)

    @property
    def k(self) -> int:
        return len(self.candidates)

    def truncate(self, k: int) -> "CandidateSet":
        k = min(k, self.k)
        return replace(
            self,
            candidates=self.candidates[:k],
            z_full=self.z_full[:k],
            z_fg=self.z_fg[:k],
            z_bg=self.z_bg[:k],
            fallback_fg=self.fallback_fg[:k],
            fallback_bg=self.fallback_bg[:k],
        )


def build_candidates(full_logits, k: int = DEFAULT_K) -> list[int]:
    """The ``k`` classes with the largest FULL logits, descending; ties -> lower index first."""
    z = np.asarray(full_logits, dtype=np.float64)
    if not 1 <= k <= z.shape[0]:
        raise ValidationError(f"k must lie in [1, {z.shape[0]}], got {k}")
    return [int(i) for i in np.argsort(-z, kind="stable")[:k]]


def gather_candidates(
    sample_id: str,
    full_logits,
    k: int,
    fg_by_prompt: Mapping[int, np.ndarray],
    bg_by_prompt: Mapping[int, np.ndarray],
    fg_on_full,
    bg_on_full,
) -> CandidateSet:
    """Assemble a :class:`CandidateSet` from per-prompt model outputs.

    ``fg_by_prompt[i]`` is the FG model's logit vector for the image
    decomposed with prompt ``i``. A prompt missing from the mapping means
    detection failed; the FG model's logits on the unmodified image
    (``fg_on_full``) are used instead, and likewise for BG.
    """
    z = np.asarray(full_logits, dtype=np.float64)
    cands = build_candidates(z, k)
    fg, bg, ffg, fbg = [], [], [], []
    for i in cands:
        for by_prompt, fallback, vals, flags in (
            (fg_by_prompt, fg_on_full, fg, ffg),
            (bg_by_prompt, bg_on_full, bg, fbg),
        ):
            row = by_prompt.get(i)
            flags.append(row is None)
            vals.append(float(np.asarray(fallback if row is None else row)[i]))
    return CandidateSet(sample_id, tuple(cands), z[cands], np.array(fg), np.array(bg), tuple(ffg), tuple(fbg))


def _aggregated(cand: CandidateSet, mode: Mode) -> np.ndarray:
    if mode == "three_way":
        return (cand.z_full + cand.z_fg + cand.z_bg) / 3.0
    if mode == "two_way":
        return (cand.z_full + cand.z_fg) / 2.0
    raise ValidationError(f"unknown aggregation mode {mode!r} (three_way|two_way)")


def aggregate(cand: CandidateSet, mode: Mode = "three_way") -> tuple[int, float]:
    """Winning class and its softmax confidence over the ``k`` aggregated values."""
    z_avg = _aggregated(cand, mode)
    probs = softmax(z_avg)
    best = int(np.argmax(z_avg))
    return cand.candidates[best], float(probs[best])


def aggregate_all(cands: Sequence[CandidateSet], mode: Mode = "three_way", k: int | None = None) -> FusionPrediction:
    preds, confs = [], []
    for c in cands:
        pred, conf = aggregate(c.truncate(k) if k is not None else c, mode)
        preds.append(pred)
        confs.append(conf)
    return FusionPrediction(np.array(preds, dtype=np.int64), np.array(confs), np.full(len(preds), BLENDED))


def sweep_k(
    val: Sequence[CandidateSet],
    val_labels,
    test: Sequence[CandidateSet],
    test_labels,
    ks: Sequence[int] = range(1, 11),
    mode: Mode = "three_way",
) -> tuple[int, list[tuple[int, float, float]]]:
    """Accuracy for every ``k``; the chosen ``k`` maximizes validation accuracy (ties -> smallest)."""
    rows = []
    for k in ks:
        rows.append(
            (
                int(k),
                accuracy(aggregate_all(val, mode, k).pred, val_labels),
                accuracy(aggregate_all(test, mode, k).pred, test_labels),
            )
        )
    best = max(rows, key=lambda r: (r[1], -r[0]))
    return best[0], rows


_HEADER = ["id", "candidate", "z_full", "z_fg", "z_bg", "fallback_fg", "fallback_bg"]


def load_candidates(path: str | Path) -> list[CandidateSet]:
    """Rows grouped by id in file order; within an id, row order is candidate rank."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    groups: dict[str, list[list[str]]] = {}
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != _HEADER:
            raise ValidationError(f"{path}: expected header {','.join(_HEADER)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(_HEADER):
                raise ValidationError(f"{path}: malformed row {row}")
            groups.setdefault(row[0], []).append(row)
    out = []
    for sid, rows in groups.items():
        try:
            out.append(
                CandidateSet(
                    sid,
                    tuple(int(r[1]) for r in rows),
                    np.array([float(r[2]) for r in rows]),
                    np.array([float(r[3]) for r in rows]),
                    np.array([float(r[4]) for r in rows]),
                    tuple(r[5] == "1" for r in rows),
                    tuple(r[6] == "1" for r in rows),
                )
            )
        except ValueError as e:
            raise ValidationError(f"{path}: id {sid!r}: {e}") from None
    return out


def save_candidates(path: str | Path, cands: Sequence[CandidateSet]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_HEADER)
        for c in cands:
            for j in range(c.k):
                w.writerow(
                    [
                        c.sample_id,
                        c.candidates[j],
                        format_float(c.z_full[j]),
                        format_float(c.z_fg[j]),
                        format_float(c.z_bg[j]),
                        int(c.fallback_fg[j]),
                        int(c.fallback_bg[j]),
                    ]
                )


def save_sweep(path: str | Path, rows: Sequence[tuple[int, float, float]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["k", "val_acc", "test_acc"])
        for k, v, t in rows:
            w.writerow([k, format_float(v), format_float(t)])
