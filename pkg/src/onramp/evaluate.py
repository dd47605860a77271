"""Forecast and classification scoring."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

HORIZON_SECONDS = tuple(range(1, 16))
STEPS_PER_SECOND = 5
FORECAST_STEPS = 75


@dataclass
class ForecastScore:
    """Per-second accuracy of a set of forecasts.

    ``within_5m[h - 1]`` is the fraction of scenes whose forecast at ``h``
    seconds lies within 5 m of the truth, likewise for 10 m; ``mae`` is the
    mean absolute longitudinal error in metres.
    """

    horizons: tuple[int, ...]
    within_5m: np.ndarray
    within_10m: np.ndarray
    mae: np.ndarray
    n_scenes: int
    excluded: int = 0

    def rows(self) -> list[dict]:
        return [{"horizon_s": h, "within_5m": float(a), "within_10m": float(b), "mae_m": float(c),
                 "n": self.n_scenes}
                for h, a, b, c in zip(self.horizons, self.within_5m, self.within_10m, self.mae)]


def score_forecast(predicted: Iterable, truth: Iterable | None = None, dt: float = 0.2) -> ForecastScore:
    """Score forecasts at 1, 2, ..., 15 s (steps 5, 10, ..., 75).

    ``predicted`` holds per-scene arrays of 75 forecast positions, or
    objects with ``x`` and ``truth_x`` attributes (``truth`` omitted).
    Scenes lacking a full, finite truth are excluded and counted.
    """
    if truth is None:
        pairs = [(getattr(r, "x"), getattr(r, "truth_x")) for r in predicted]
    else:
        pairs = list(zip(predicted, truth))
    steps_per_s = int(round(1.0 / dt))
    idx = np.array(HORIZON_SECONDS) * steps_per_s - 1
    errs, excluded = [], 0
    for xp, xt in pairs:
        if xt is None:
            excluded += 1
            continue
        xp = np.asarray(xp, dtype=float)
        xt = np.asarray(xt, dtype=float)
        if xt.size < idx[-1] + 1 or xp.size < idx[-1] + 1 or not np.isfinite(xt[idx]).all():
            excluded += 1
            continue
        errs.append(np.abs(xp[idx] - xt[idx]))
    n = len(errs)
    if n == 0:
        nan = np.full(len(idx), np.nan)
        return ForecastScore(HORIZON_SECONDS, nan, nan.copy(), nan.copy(), 0, excluded)
    E = np.array(errs)
    return ForecastScore(HORIZON_SECONDS, np.mean(E <= 5.0, axis=0), np.mean(E <= 10.0, axis=0),
                         E.mean(axis=0), n, excluded)


@dataclass
class ClassificationScore:
    """Confusion-derived metrics; ratios with a zero denominator are None."""

    accuracy: float | None
    tnr: float | None
    ppv: float | None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "ClassificationScore":
        def ratio(a, b):
            return None if b == 0 else a / b
        return cls(ratio(tp + tn, tp + fp + tn + fn), ratio(tn, tn + fp), ratio(tp, tp + fp),
                   int(tp), int(fp), int(tn), int(fn))

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ClassificationScore":
        y_true = np.asarray(y_true, dtype=bool)
        y_pred = np.asarray(y_pred, dtype=bool)
        if y_true.shape != y_pred.shape:
            raise ValueError("label and prediction arrays differ in shape")
        return cls.from_counts(int(np.sum(y_true & y_pred)), int(np.sum(~y_true & y_pred)),
                               int(np.sum(~y_true & ~y_pred)), int(np.sum(y_true & ~y_pred)))


def score_classification(registry: Mapping, test_sets: Mapping) -> dict:
    """Score every ``(kind, t)`` forest on its matching test set.

    ``test_sets`` maps ``(kind, t)`` to ``(X, y)`` pairs (or objects with
    ``X``/``y``).  Missing or empty sets give ``None``.
    """
    out = {}
    for key, forest in registry.items():
        ts = test_sets.get(key)
        if ts is None:
            out[key] = None
            continue
        X, y = (ts.X, ts.y) if hasattr(ts, "X") else ts
        if len(y) == 0:
            out[key] = None
            continue
        pred = forest.predict_proba(X) >= 0.5
        out[key] = ClassificationScore.from_labels(y, pred)
    return out


def mean_accuracy(scores: Mapping, kind: str, horizons: Sequence[int] = tuple(range(16))) -> float | None:
    vals = [scores[(kind, t)].accuracy for t in horizons
            if scores.get((kind, t)) is not None and scores[(kind, t)].accuracy is not None]
    return float(np.mean(vals)) if vals else None
