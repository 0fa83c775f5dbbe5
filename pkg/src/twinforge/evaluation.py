"""Threshold-aware confusion counts, per-class soundness/completeness, and
the confidence-threshold sweep."""

import csv
from dataclasses import dataclass

import numpy as np

from twinforge.exceptions import ValidationError


@dataclass(frozen=True)
class TauConfusion:
    """Counts at one threshold.

    TP: correct and confident. FN: correct but rejected (conf < tau).
    FP: wrong and confident. TN: wrong and rejected.
    """

    tp: int
    tn: int
    fp: int
    fn: int
    tau: float

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.total

    @property
    def frr(self):
        correct = self.tp + self.fn
        return self.fn / correct if correct else 0.0

    @property
    def rejection_rate(self):
        return (self.fn + self.tn) / self.total

    def to_dict(self):
        return {
            "tau": self.tau,
            "total": self.total,
            "tp": self.tp,
            "tn": self.tn,
            "fp": self.fp,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "frr": self.frr,
            "rejection_rate": self.rejection_rate,
        }


@dataclass(frozen=True)
class PerClassReport:
    class_id: int
    soundness: float  # None when the class has no samples
    completeness: float  # None when there are no samples of other classes
    n_samples: int

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "soundness": self.soundness,
            "completeness": self.completeness,
            "n_samples": self.n_samples,
        }


@dataclass(frozen=True)
class TauSweep:
    curve: list
    optimal_tau: float

    @property
    def optimal(self):
        return next(c for c in self.curve if c.tau == self.optimal_tau)

    def rows(self):
        return [(c.tau, c.tp, c.tn, c.fp, c.fn) for c in self.curve]

    def to_dict(self):
        return {
            "optimal_tau": self.optimal_tau,
            "optimal": self.optimal.to_dict(),
            "curve": [dict(zip(("tau", "tp", "tn", "fp", "fn"), r)) for r in self.rows()],
        }


def _arrays(predictions):
    if not len(predictions):
        raise ValidationError("need at least one prediction")
    y = np.fromiter((t for t, _ in predictions), dtype=np.int64, count=len(predictions))
    label = np.fromiter((p.label for _, p in predictions), dtype=np.int64, count=len(predictions))
    conf = np.fromiter((p.confidence for _, p in predictions), dtype=np.float64,
                       count=len(predictions))
    return y, label, conf


def confusion_with_tau(predictions, tau):
    """Count (true_class, Prediction) pairs into TP/TN/FP/FN at ``tau``.

    Each prediction's own stored threshold is ignored; only its argmax and
    confidence are used.
    """
    y, label, conf = _arrays(list(predictions))
    correct = label == y
    confident = conf >= tau
    return TauConfusion(
        tp=int(np.sum(correct & confident)),
        tn=int(np.sum(~correct & ~confident)),
        fp=int(np.sum(~correct & confident)),
        fn=int(np.sum(correct & ~confident)),
        tau=float(tau),
    )


def per_class_reports(predictions, n_classes):
    """Soundness and completeness per class from argmax labels (tau ignored)."""
    y, label, _ = _arrays(list(predictions))
    reports = []
    for c in range(n_classes):
        own = y == c
        others = ~own
        soundness = float(np.mean(label[own] == c)) if own.any() else None
        completeness = (1.0 - float(np.sum(label[others] == c)) / int(others.sum())
                        if others.any() else None)
        reports.append(PerClassReport(c, soundness, completeness, int(own.sum())))
    return reports


def spoof_acceptance_rates(predictions, n_classes, tau):
    """Per class c: share of non-c samples accepted as c at ``tau``."""
    y, label, conf = _arrays(list(predictions))
    accepted = conf >= tau
    rates = []
    for c in range(n_classes):
        others = y != c
        n = int(others.sum())
        rates.append(float(np.sum(others & accepted & (label == c))) / n if n else None)
    return rates


def default_grid(step=0.01):
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def sweep_tau(predictions, grid):
    """Confusion counts at every grid threshold; the optimum maximizes TP+TN,
    ties going to the smaller threshold."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValidationError("threshold grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("threshold grid must be strictly ascending")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ValidationError("threshold grid must lie in [0, 1]")
    predictions = list(predictions)
    curve = [confusion_with_tau(predictions, tau) for tau in grid]
    best = curve[0]
    for c in curve[1:]:
        if c.tp + c.tn > best.tp + best.tn:
            best = c
    return TauSweep(curve, best.tau)


def evaluation_report(predictions, n_classes, tau, grid=None):
    """Everything the ``evaluate`` command emits, as plain data."""
    predictions = list(predictions)
    report = {
        "n_samples": len(predictions),
        "confusion": confusion_with_tau(predictions, tau).to_dict(),
        "confusion_at_zero": confusion_with_tau(predictions, 0.0).to_dict(),
        "per_class": [r.to_dict() for r in per_class_reports(predictions, n_classes)],
        "spoof_acceptance": spoof_acceptance_rates(predictions, n_classes, tau),
    }
    if grid is not None:
        report["sweep"] = sweep_tau(predictions, grid).to_dict()
    return report


def write_curve_csv(sweep, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "tp", "tn", "fp", "fn"])
        writer.writerows(sweep.rows())
