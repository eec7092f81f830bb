"""Regression metrics and per-dimension report assembly.

r-squared is the coefficient of determination (1 - SS_res / SS_tot about
the target mean), which can go negative when predictions underperform the
target-mean baseline.  Undefined cases (constant vectors) raise instead
of silently returning zeros or NaNs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import DIMENSIONS, N_TASKS
from .errors import FormatError, UndefinedMetricError


def _as_pair(pred, target, min_len):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} vs {target.shape[0]}")
    if pred.shape[0] < min_len:
        raise ValueError(f"need at least {min_len} points, got {pred.shape[0]}")
    return pred, target


def r_squared(pred, target):
    """1 - SS_res / SS_tot; undefined for a constant target."""
    pred, target = _as_pair(pred, target, 2)
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r_squared undefined: target is constant")
    ss_res = float(np.sum((target - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def pearson(x, y):
    """Sample correlation coefficient; undefined if either input is constant."""
    x, y = _as_pair(x, y, 2)
    xm = x - x.mean()
    ym = y - y.mean()
    sx = float(np.sum(xm * xm))
    sy = float(np.sum(ym * ym))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("pearson undefined: zero variance input")
    return float(np.sum(xm * ym) / np.sqrt(sx * sy))


def rmse(pred, target):
    """Root mean squared error."""
    pred, target = _as_pair(pred, target, 1)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


@dataclass
class MetricRow:
    dimension: str
    r_squared: float
    pearson: float
    rmse: float


@dataclass
class MetricsReport:
    """Twelve metric rows in the fixed dimension order, plus provenance."""

    rows: list
    provenance: dict

    def __post_init__(self):
        if [r.dimension for r in self.rows] != list(DIMENSIONS):
            raise ValueError("report rows must cover the 12 dimensions in order")
        for r in self.rows:
            if r.rmse < 0 or not -1.0 <= r.pearson <= 1.0 or r.r_squared > 1.0 + 1e-12:
                raise ValueError(f"metric row out of range: {r}")

    def mean_r_squared(self):
        return float(np.mean([r.r_squared for r in self.rows]))

    def values(self):
        """(12, 3) array in (r_squared, pearson, rmse) column order."""
        return np.array(
            [[r.r_squared, r.pearson, r.rmse] for r in self.rows], dtype=np.float64
        )

    def provenance_line(self):
        parts = [f"{k}={self.provenance[k]}" for k in sorted(self.provenance)]
        return "# " + " ".join(parts)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.provenance_line() + "\n")
            writer = csv.writer(fh)
            writer.writerow(["dimension", "r_squared", "pearson", "rmse"])
            for r in self.rows:
                writer.writerow(
                    [r.dimension, repr(float(r.r_squared)), repr(float(r.pearson)),
                     repr(float(r.rmse))]
                )

    @staticmethod
    def from_csv(path):
        with open(path, newline="", encoding="utf-8") as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise FormatError(f"{path}: missing provenance comment line")
            provenance = {}
            for part in first[2:].strip().split():
                if "=" in part:
                    key, value = part.split("=", 1)
                    provenance[key] = value
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["dimension", "r_squared", "pearson", "rmse"]:
                raise FormatError(f"{path}: unexpected report header {header!r}")
            rows = [
                MetricRow(rec[0], float(rec[1]), float(rec[2]), float(rec[3]))
                for rec in reader
                if rec
            ]
        return MetricsReport(rows, provenance)


def build_report(predictions, targets, provenance):
    """Apply the three metrics per dimension.

    predictions/targets: (N, 12) aligned arrays.  Metric errors are
    re-raised annotated with the offending dimension's name.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 2 \
            or predictions.shape[1] != N_TASKS:
        raise ValueError(
            f"expected aligned (N, {N_TASKS}) arrays, got "
            f"{predictions.shape} and {targets.shape}"
        )
    rows = []
    for d, name in enumerate(DIMENSIONS):
        try:
            rows.append(
                MetricRow(
                    name,
                    r_squared(predictions[:, d], targets[:, d]),
                    pearson(predictions[:, d], targets[:, d]),
                    rmse(predictions[:, d], targets[:, d]),
                )
            )
        except UndefinedMetricError as exc:
            raise UndefinedMetricError(f"{name}: {exc}") from None
    return MetricsReport(rows, dict(provenance))
