"""Regression error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALES = ("normalized", "watts")


def _pair(y_true, y_pred):
    a = np.asarray(y_true, dtype=np.float64).ravel()
    b = np.asarray(y_pred, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("metrics need at least one point")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} true values vs {b.size} predictions")
    return a, b


def mae(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    return float(np.mean(np.abs(a - b)))


def rmse(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    d = np.abs(a - b)
    m = float(np.max(d))
    if m == 0.0 or not np.isfinite(m):
        return m
    # scaling by the largest error keeps tiny or huge errors from under/overflowing when squared
    s = d / m
    return m * float(np.sqrt(np.mean(s * s)))


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    scale: str
    n_points: int

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    @classmethod
    def compute(cls, y_true, y_pred, scale: str) -> "MetricsReport":
        a, b = _pair(y_true, y_pred)
        return cls(mae(a, b), rmse(a, b), scale, a.size)
