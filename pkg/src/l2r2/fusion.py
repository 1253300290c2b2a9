"""Two-input fusion of classifier outputs.

Input 1 is the protected input (normally the foreground view); input 2 is the
full image or background view. All functions take batches of logit rows
(``N x C``, a single ``C`` vector is promoted to one row) and return a
:class:`FusionPrediction`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .calibration import CalibrationParams, fit_classwise_temperatures, fit_temperature, log_softmax, scale_logits, softmax
from .core_data import ValidationError, format_float
from .metrics import accuracy, macro_accuracy

__all__ = [
    "METHODS",
    "FusionPrediction",
    "FusionModel",
    "FCParams",
    "DivergenceError",
    "fuse_max",
    "fuse_max_scaled",
    "fuse_threshold",
    "fuse_ts_average",
    "fuse_ts_weighted_average",
    "fuse_weighted_logits",
    "fuse_concat_fc",
    "fit_threshold",
    "fit_alpha",
    "fit_weighted_logits",
    "fit_concat_fc",
    "fc_forward",
    "fc_loss_and_grad",
    "init_fc",
    "fit_fusion",
    "fit_all",
    "select_fusion",
    "oracle_accuracy",
    "save_predictions",
    "load_predictions",
    "GRID",
]

# canonical order; select_fusion breaks ties by it
METHODS = ("max", "max_scaled", "threshold", "ts_avg", "ts_wavg", "concat_fc", "weighted_logits")

GRID = np.round(np.linspace(0.0, 1.0, 101), 2)

INPUT1, INPUT2, BLENDED = "input1", "input2", "blended"


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FusionPrediction:
    pred: np.ndarray
    confidence: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.pred)


def _rows(z) -> np.ndarray:
    a = np.asarray(z, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _check_pair(z1, z2) -> tuple[np.ndarray, np.ndarray]:
    z1, z2 = _rows(z1), _rows(z2)
    if z1.shape != z2.shape:
        raise ValidationError(f"fusion inputs differ in shape: {z1.shape} vs {z2.shape}")
    return z1, z2


def _top(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.argmax(probs, axis=1)
    return pred, probs[np.arange(len(pred)), pred]


def _from_probs(probs: np.ndarray) -> FusionPrediction:
    pred, conf = _top(probs)
    return FusionPrediction(pred, conf, np.full(len(pred), BLENDED))


def fuse_max(z1, z2) -> FusionPrediction:
    """Take the more confident of the two predictions; equal confidence goes to input 1."""
    z1, z2 = _check_pair(z1, z2)
    y1, p1 = _top(softmax(z1))
    y2, p2 = _top(softmax(z2))
    first = p1 >= p2
    return FusionPrediction(
        np.where(first, y1, y2),
        np.where(first, p1, p2),
        np.where(first, INPUT1, INPUT2),
    )


def fuse_max_scaled(z1, z2, T1: CalibrationParams, T2: CalibrationParams) -> FusionPrediction:
    if T1 is None or T2 is None:
        raise ValidationError("fuse_max_scaled needs calibration params for both inputs")
    return fuse_max(scale_logits(_rows(z1), T1), scale_logits(_rows(z2), T2))


def fuse_threshold(z1, z2, t: float) -> FusionPrediction:
    """Keep input 1 when its confidence exceeds ``t``, otherwise :func:`fuse_max`."""
    if t < 0:
        raise ValidationError(f"threshold must be >= 0, got {t}")
    z1, z2 = _check_pair(z1, z2)
    y1, p1 = _top(softmax(z1))
    fallback = fuse_max(z1, z2)
    keep = p1 > t
    return FusionPrediction(
        np.where(keep, y1, fallback.pred),
        np.where(keep, p1, fallback.confidence),
        np.where(keep, INPUT1, fallback.source),
    )


def fuse_ts_average(z1, z2, T1: CalibrationParams, T2: CalibrationParams) -> FusionPrediction:
    z1, z2 = _check_pair(z1, z2)
    probs = 0.5 * (softmax(scale_logits(z1, T1)) + softmax(scale_logits(z2, T2)))
    return _from_probs(probs)


def fuse_ts_weighted_average(z1, z2, T1: CalibrationParams, T2: CalibrationParams, alpha: float) -> FusionPrediction:
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    z1, z2 = _check_pair(z1, z2)
    probs = alpha * softmax(scale_logits(z1, T1)) + (1.0 - alpha) * softmax(scale_logits(z2, T2))
    return _from_probs(probs)


def fuse_weighted_logits(z1, z2, w1, w2) -> FusionPrediction:
    z1, z2 = _check_pair(z1, z2)
    combined = np.asarray(w1, dtype=np.float64) * z1 + np.asarray(w2, dtype=np.float64) * z2
    return _from_probs(softmax(combined))


# ---------------------------------------------------------------------------
# Grid fitting
# ---------------------------------------------------------------------------


def _scorer(labels, macro: bool, num_classes: int | None):
    if macro:
        C = num_classes if num_classes is not None else int(np.max(labels)) + 1
        return lambda pred: macro_accuracy(pred, labels, C)
    return lambda pred: accuracy(pred, labels)


def _threshold_scores(z1, z2, labels, grid, macro=False, num_classes=None) -> np.ndarray:
    score = _scorer(labels, macro, num_classes)
    return np.array([score(fuse_threshold(z1, z2, float(t)).pred) for t in grid])


def fit_threshold(z1, z2, labels, grid=GRID, macro: bool = False, num_classes: int | None = None) -> float:
    """Threshold maximizing validation accuracy; ties go to the smallest value."""
    scores = _threshold_scores(z1, z2, labels, grid, macro, num_classes)
    return float(grid[int(np.argmax(scores))])


def fit_alpha(
    z1, z2, labels, T1: CalibrationParams, T2: CalibrationParams,
    grid=GRID, macro: bool = False, num_classes: int | None = None,
) -> float:
    """Mixing weight maximizing validation accuracy; ties go to the value closest to 0.5, then the smaller."""
    score = _scorer(labels, macro, num_classes)
    p1 = softmax(scale_logits(_rows(z1), T1))
    p2 = softmax(scale_logits(_rows(z2), T2))
    scores = np.array([score(np.argmax(a * p1 + (1.0 - a) * p2, axis=1)) for a in grid])
    best = scores.max()
    tied = [float(a) for a, s in zip(grid, scores) if s == best]
    return min(tied, key=lambda a: (abs(a - 0.5), a))


# ---------------------------------------------------------------------------
# Gradient-trained fusions
# ---------------------------------------------------------------------------


def _ce_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = len(labels)
    ls = log_softmax(logits)
    loss = float(-ls[np.arange(n), labels].mean())
    g = np.exp(ls)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def _gd(params: dict, loss_grad, val_loss, lr: float, epochs: int, patience: int):
    """Full-batch gradient descent with early stopping on validation loss.

    Returns the parameters of the best validation checkpoint and the list of
    accepted checkpoint losses, which is non-increasing by construction.
    """
    best = {k: v.copy() for k, v in params.items()}
    best_val = val_loss(params)
    history = [best_val]
    stale = 0
    for epoch in range(epochs):
        loss, grads = loss_grad(params)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"training diverged at epoch {epoch}: loss={loss}, lr={lr}")
        for k in params:
            params[k] = params[k] - lr * grads[k]
        v = val_loss(params)
        if not math.isfinite(v):
            raise DivergenceError(f"validation loss non-finite at epoch {epoch} (train loss {loss})")
        if v < best_val:
            best_val, stale = v, 0
            best = {k: p.copy() for k, p in params.items()}
            history.append(v)
        else:
            stale += 1
            if stale >= patience:
                break
    return best, history


def fit_weighted_logits(
    train: tuple, val: tuple, lr: float = 0.1, epochs: int = 500, patience: int = 20
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Per-class weights for ``w1*z1 + w2*z2`` by gradient descent on training CE.

    ``train`` and ``val`` are ``(z1, z2, labels)`` triples. Starts from
    ``w1 = w2 = 0.5`` and keeps the best validation-CE checkpoint.
    """
    z1, z2, y = _rows(train[0]), _rows(train[1]), np.asarray(train[2], dtype=np.int64)
    v1, v2, vy = _rows(val[0]), _rows(val[1]), np.asarray(val[2], dtype=np.int64)
    if len(y) == 0:
        raise ValidationError("fit_weighted_logits: empty training set")
    C = z1.shape[1]

    def loss_grad(p):
        loss, g = _ce_grad(p["w1"] * z1 + p["w2"] * z2, y)
        return loss, {"w1": (g * z1).sum(axis=0), "w2": (g * z2).sum(axis=0)}

    def val_loss(p):
        return _ce_grad(p["w1"] * v1 + p["w2"] * v2, vy)[0]

    params = {"w1": np.full(C, 0.5), "w2": np.full(C, 0.5)}
    best, history = _gd(params, loss_grad, val_loss, lr, epochs, patience)
    return best["w1"], best["w2"], history


@dataclass
class FCParams:
    """Two-layer network ``2C -> H -> C`` with a rectifier between the layers."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @classmethod
    def from_dict(cls, d) -> "FCParams":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("W1", "b1", "W2", "b2")))


def init_fc(num_classes: int, hidden: int | None = None, seed: int = 0) -> FCParams:
    """Glorot-uniform weights, zero biases."""
    H = hidden or 2 * num_classes
    rng = np.random.default_rng(seed)
    d_in = 2 * num_classes

    def glorot(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return FCParams(glorot(d_in, H), np.zeros(H), glorot(H, num_classes), np.zeros(num_classes))


def fc_forward(params: FCParams | dict, x: np.ndarray) -> np.ndarray:
    p = params.as_dict() if isinstance(params, FCParams) else params
    h = np.maximum(x @ p["W1"] + p["b1"], 0.0)
    return h @ p["W2"] + p["b2"]


def fc_loss_and_grad(params: FCParams | dict, x: np.ndarray, labels: np.ndarray) -> tuple[float, dict]:
    """Mean cross-entropy of the FC fusion network and analytic gradients."""
    p = params.as_dict() if isinstance(params, FCParams) else params
    pre = x @ p["W1"] + p["b1"]
    h = np.maximum(pre, 0.0)
    out = h @ p["W2"] + p["b2"]
    loss, g_out = _ce_grad(out, labels)
    g_h = g_out @ p["W2"].T
    g_pre = g_h * (pre > 0)
    return loss, {
        "W1": x.T @ g_pre,
        "b1": g_pre.sum(axis=0),
        "W2": h.T @ g_out,
        "b2": g_out.sum(axis=0),
    }


def fit_concat_fc(
    train: tuple, val: tuple, hidden: int | None = None, seed: int = 0,
    lr: float = 0.1, epochs: int = 500, patience: int = 20,
) -> tuple[FCParams, list[float]]:
    """Train the FC network on concatenated logits ``[z1, z2]``."""
    x = np.hstack([_rows(train[0]), _rows(train[1])])
    y = np.asarray(train[2], dtype=np.int64)
    vx = np.hstack([_rows(val[0]), _rows(val[1])])
    vy = np.asarray(val[2], dtype=np.int64)
    if len(y) == 0:
        raise ValidationError("fit_concat_fc: empty training set")
    C = x.shape[1] // 2
    params = init_fc(C, hidden, seed).as_dict()
    best, history = _gd(
        params,
        lambda p: fc_loss_and_grad(p, x, y),
        lambda p: _ce_grad(fc_forward(p, vx), vy)[0],
        lr, epochs, patience,
    )
    return FCParams.from_dict(best), history


def fuse_concat_fc(z1, z2, fc: FCParams) -> FusionPrediction:
    z1, z2 = _check_pair(z1, z2)
    return _from_probs(softmax(fc_forward(fc, np.hstack([z1, z2]))))


# ---------------------------------------------------------------------------
# Fitted models, selection, oracle
# ---------------------------------------------------------------------------


def _to_jsonable(v):
    if isinstance(v, CalibrationParams):
        return {"__calibration__": v.to_dict()}
    if isinstance(v, FCParams):
        return {"__fc__": {k: a.tolist() for k, a in v.as_dict().items()}}
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def _from_jsonable(v):
    if isinstance(v, dict) and "__calibration__" in v:
        return CalibrationParams.from_dict(v["__calibration__"])
    if isinstance(v, dict) and "__fc__" in v:
        return FCParams.from_dict(v["__fc__"])
    if isinstance(v, list):
        return np.asarray(v, dtype=np.float64)
    return v


@dataclass(frozen=True)
class FusionModel:
    method: str
    params: dict[str, Any] = field(default_factory=dict)
    input_views: tuple[str, str] = ("fg", "full")

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown fusion method {self.method!r}; choose from {', '.join(METHODS)}")
        t = self.params.get("t")
        if t is not None and t < 0:
            raise ValidationError("threshold must be >= 0")
        a = self.params.get("alpha")
        if a is not None and not 0 <= a <= 1:
            raise ValidationError("alpha must lie in [0, 1]")

    def predict(self, z1, z2) -> FusionPrediction:
        p = self.params
        m = self.method
        if m == "max":
            return fuse_max(z1, z2)
        if m == "max_scaled":
            return fuse_max_scaled(z1, z2, p["T1"], p["T2"])
        if m == "threshold":
            return fuse_threshold(z1, z2, p["t"])
        if m == "ts_avg":
            return fuse_ts_average(z1, z2, p["T1"], p["T2"])
        if m == "ts_wavg":
            return fuse_ts_weighted_average(z1, z2, p["T1"], p["T2"], p["alpha"])
        if m == "weighted_logits":
            return fuse_weighted_logits(z1, z2, p["w1"], p["w2"])
        return fuse_concat_fc(z1, z2, p["fc"])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "input_views": list(self.input_views),
            "params": {k: _to_jsonable(v) for k, v in self.params.items() if k != "history"},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FusionModel":
        params = {k: _from_jsonable(v) for k, v in d.get("params", {}).items()}
        return cls(d["method"], params, tuple(d.get("input_views", ("fg", "full"))))

    @classmethod
    def from_json(cls, s: str) -> "FusionModel":
        return cls.from_dict(json.loads(s))


def _calibrate(z, y, kind: str) -> CalibrationParams:
    if kind == "classwise":
        return fit_classwise_temperatures(z, y)
    return fit_temperature(z, y)


def fit_fusion(
    method: str, train: tuple, val: tuple, views: tuple[str, str] = ("fg", "full"),
    seed: int = 0, calibration: str = "global", macro: bool = False, num_classes: int | None = None,
) -> FusionModel:
    """Fit one fusion method. ``train``/``val`` are ``(z1, z2, labels)`` triples.

    Calibration and the grid parameters use the validation split; the
    gradient-trained fusions train on ``train`` and early-stop on ``val``.
    """
    v1, v2, vy = val
    if method == "max":
        return FusionModel("max", {}, views)
    if method == "threshold":
        return FusionModel("threshold", {"t": fit_threshold(v1, v2, vy, macro=macro, num_classes=num_classes)}, views)
    if method in ("max_scaled", "ts_avg", "ts_wavg"):
        T1, T2 = _calibrate(v1, vy, calibration), _calibrate(v2, vy, calibration)
        params: dict[str, Any] = {"T1": T1, "T2": T2}
        if method == "ts_wavg":
            params["alpha"] = fit_alpha(v1, v2, vy, T1, T2, macro=macro, num_classes=num_classes)
        return FusionModel(method, params, views)
    if method == "weighted_logits":
        w1, w2, hist = fit_weighted_logits(train, val)
        return FusionModel(method, {"w1": w1, "w2": w2, "history": hist}, views)
    if method == "concat_fc":
        fc, hist = fit_concat_fc(train, val, seed=seed)
        return FusionModel(method, {"fc": fc, "history": hist}, views)
    raise ValidationError(f"unknown fusion method {method!r}; choose from {', '.join(METHODS)}")


def fit_all(train: tuple, val: tuple, views=("fg", "full"), seed: int = 0, **kw) -> list[FusionModel]:
    return [fit_fusion(m, train, val, views, seed=seed, **kw) for m in METHODS]


def select_fusion(
    candidates: Sequence[FusionModel], val: tuple, macro: bool = False, num_classes: int | None = None
) -> tuple[FusionModel, list[float]]:
    """Candidate with the highest validation score and the score of every candidate.

    Ties go to the earliest method in the canonical order, then list order.
    """
    if not candidates:
        raise ValidationError("select_fusion: no candidates")
    v1, v2, vy = val
    score = _scorer(vy, macro, num_classes)
    scores = [score(m.predict(v1, v2).pred) for m in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], METHODS.index(candidates[i].method), i))
    return candidates[order[0]], scores


def oracle_accuracy(preds: Sequence, labels) -> float:
    """Fraction of samples where at least one input predicts the label."""
    if len(preds) < 2:
        raise ValidationError("oracle_accuracy needs at least two prediction vectors")
    y = np.asarray(labels, dtype=np.int64)
    hit = np.zeros(len(y), dtype=bool)
    for p in preds:
        p = np.asarray(p, dtype=np.int64)
        if p.shape != y.shape:
            raise ValidationError("prediction vector length differs from labels")
        hit |= p == y
    return float(hit.mean())


def save_predictions(path: str | Path, ids: Sequence[str], pred: FusionPrediction) -> None:
    if len(ids) != len(pred):
        raise ValidationError(f"{len(ids)} ids for {len(pred)} predictions")
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "pred", "confidence", "source"])
        for i, y, c, s in zip(ids, pred.pred, pred.confidence, pred.source):
            w.writerow([i, int(y), format_float(c), s])


def load_predictions(path: str | Path) -> tuple[tuple[str, ...], FusionPrediction]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        if next(reader, None) != ["id", "pred", "confidence", "source"]:
            raise ValidationError(f"{path}: expected header id,pred,confidence,source")
        rows = [r for r in reader if r]
    try:
        pred = FusionPrediction(
            np.array([int(r[1]) for r in rows], dtype=np.int64),
            np.array([float(r[2]) for r in rows]),
            np.array([r[3] for r in rows]),
        )
    except (ValueError, IndexError) as e:
        raise ValidationError(f"{path}: {e}") from None
    return tuple(r[0] for r in rows), pred
