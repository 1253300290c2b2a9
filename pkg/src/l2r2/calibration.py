"""Temperature scaling (global and per-class), cross-entropy and ECE."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core_data import ValidationError

__all__ = [
    "CalibrationParams",
    "EceReport",
    "CalibrationWarning",
    "softmax",
    "log_softmax",
    "scale_logits",
    "cross_entropy",
    "top1",
    "fit_temperature",
    "fit_classwise_temperatures",
    "expected_calibration_error",
    "DEFAULT_BINS",
    "T_BOUNDS",
    "CLASSWISE_GRID",
]

DEFAULT_BINS = 15
T_BOUNDS = (0.05, 20.0)
CLASSWISE_GRID = np.exp(np.linspace(math.log(0.2), math.log(5.0), 30))


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CalibrationParams:
    kind: Literal["identity", "global", "classwise"]
    T: float | tuple[float, ...] = 1.0

    def __post_init__(self):
        if self.kind == "identity":
            object.__setattr__(self, "T", 1.0)
        elif self.kind == "global":
            T = float(self.T)
            if not (T > 0 and math.isfinite(T)):
                raise ValidationError(f"temperature must be positive, got {self.T}")
            object.__setattr__(self, "T", T)
        elif self.kind == "classwise":
            T = tuple(float(t) for t in np.atleast_1d(self.T))
            if not all(t > 0 and math.isfinite(t) for t in T):
                raise ValidationError(f"classwise temperatures must be positive, got {T}")
            object.__setattr__(self, "T", T)
        else:
            raise ValidationError(f"unknown calibration kind {self.kind!r}")

    @classmethod
    def identity(cls) -> "CalibrationParams":
        return cls("identity")

    def as_array(self, num_classes: int | None = None) -> np.ndarray:
        if self.kind == "classwise":
            T = np.asarray(self.T, dtype=np.float64)
            if num_classes is not None and T.shape[0] != num_classes:
                raise ValidationError(f"classwise params have {T.shape[0]} temperatures for {num_classes} classes")
            return T
        return np.full(num_classes or 1, float(self.T))

    def to_dict(self) -> dict:
        if self.kind == "classwise":
            return {"kind": "classwise", "T": list(self.T)}
        return {"kind": self.kind, "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationParams":
        return cls(d["kind"], d.get("T", 1.0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "CalibrationParams":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class EceReport:
    ece: float
    edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray


def _as_matrix(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    return z


def softmax(z) -> np.ndarray:
    """Row-wise softmax with max subtraction; 1-D in, 1-D out."""
    a = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValidationError("softmax: non-finite input")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    a = np.asarray(z, dtype=np.float64)
    m = a.max(axis=-1, keepdims=True)
    return a - m - np.log(np.exp(a - m).sum(axis=-1, keepdims=True))


def top1(scores) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (ties -> lowest index) and its softmax confidence, per row."""
    p = softmax(_as_matrix(scores))
    pred = np.argmax(p, axis=1)
    return pred, p[np.arange(len(pred)), pred]


def scale_logits(z, params: CalibrationParams) -> np.ndarray:
    a = np.asarray(z, dtype=np.float64)
    if params.kind == "identity":
        return a.copy()
    if params.kind == "global":
        return a / params.T
    T = params.as_array(a.shape[-1])
    return a / T


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    z = _as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.shape[0] == 0:
        raise ValidationError("cross_entropy: empty input")
    if y.shape[0] != z.shape[0]:
        raise ValidationError(f"cross_entropy: {y.shape[0]} labels for {z.shape[0]} rows")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValidationError("cross_entropy: label out of range")
    nll = -log_softmax(z)[np.arange(len(y)), y]
    return float(nll.mean())


def _golden_section(f, lo: float, hi: float, iters: int) -> float:
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2


def fit_temperature(logits, labels, bounds: tuple[float, float] = T_BOUNDS, iters: int = 60) -> CalibrationParams:
    """Global temperature minimizing validation cross-entropy.

    Golden-section search on log T, followed by a comparison against the
    bracket ends and T=1, so the result never has higher CE than T=1.
    A validation set with a single class and more than one sample is
    degenerate: a warning is issued and T=1 returned.
    """
    z = _as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.shape[0] == 0:
        raise ValidationError("fit_temperature: empty validation set")
    if z.shape[0] > 1 and np.unique(y).size < 2:
        warnings.warn("fit_temperature: single-class validation set, returning T=1", CalibrationWarning)
        return CalibrationParams("global", 1.0)

    def ce(logT: float) -> float:
        return cross_entropy(z / math.exp(logT), y)

    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    best = _golden_section(ce, lo, hi, iters)
    # local refinement: the bracket may have collapsed onto an end or missed T=1
    candidates = [best, lo, hi, 0.0]
    values = [ce(c) for c in candidates]
    logT = candidates[int(np.argmin(values))]
    # a bracket that collapsed onto an end means CE is monotone on this set
    for bound in (lo, hi):
        if abs(logT - bound) < 1e-3 and ce(bound) <= ce(logT):
            logT = bound
    if logT in (lo, hi):
        warnings.warn(
            f"fit_temperature: optimum at search bound T={math.exp(logT):.4g} (CE monotone on this set)",
            CalibrationWarning,
        )
    return CalibrationParams("global", math.exp(logT))


def expected_calibration_error(scores, labels, bins: int = DEFAULT_BINS, is_probs: bool = False) -> EceReport:
    """Equal-width binning of top-1 confidence over (0, 1].

    ``scores`` are logits unless ``is_probs`` is set.
    """
    if bins < 1:
        raise ValidationError("expected_calibration_error: bins must be >= 1")
    s = _as_matrix(scores)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.shape[0] == 0:
        raise ValidationError("expected_calibration_error: empty input")
    p = s if is_probs else softmax(s)
    pred = np.argmax(p, axis=1)
    conf = p[np.arange(len(pred)), pred]
    correct = (pred == y).astype(np.float64)
    # bin b covers (b/B, (b+1)/B]
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    nonempty = counts > 0
    mean_conf = np.zeros(bins)
    acc = np.zeros(bins)
    mean_conf[nonempty] = conf_sum[nonempty] / counts[nonempty]
    acc[nonempty] = acc_sum[nonempty] / counts[nonempty]
    ece = float(np.sum(counts[nonempty] / len(y) * np.abs(acc[nonempty] - mean_conf[nonempty])))
    return EceReport(ece, np.linspace(0.0, 1.0, bins + 1), counts, mean_conf, acc)


def fit_classwise_temperatures(
    logits, labels, grid=CLASSWISE_GRID, bins: int = DEFAULT_BINS
) -> CalibrationParams:
    """Greedy one-pass grid search of one temperature per class.

    Classes are visited in ascending order. For each class the grid value with
    the lowest ECE is kept, provided ECE strictly decreases and accuracy does
    not drop relative to the current state; otherwise that class keeps T=1.
    """
    z = _as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.shape[0] == 0:
        raise ValidationError("fit_classwise_temperatures: empty validation set")
    C = z.shape[1]
    T = np.ones(C)

    def evaluate(temps: np.ndarray) -> tuple[float, float]:
        scaled = z / temps
        return (
            expected_calibration_error(scaled, y, bins).ece,
            float(np.mean(np.argmax(scaled, axis=1) == y)),
        )

    cur_ece, cur_acc = evaluate(T)
    for k in range(C):
        best_t, best_ece, best_acc = None, cur_ece, cur_acc
        for t in grid:
            trial = T.copy()
            trial[k] = t
            e, a = evaluate(trial)
            if e < best_ece and a >= cur_acc:
                best_t, best_ece, best_acc = t, e, a
        if best_t is not None:
            T[k] = best_t
            cur_ece, cur_acc = best_ece, best_acc
    return CalibrationParams("classwise", tuple(T))
