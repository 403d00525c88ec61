"""Detector evaluation: minimum error probability, ROC, AUC and weighted AUC."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MetricError

logger = logging.getLogger(__name__)

# TPR bands and their weights, matching the public weighted-AUC scorer
WAUC_TPR_THRESHOLDS = (0.0, 0.4, 1.0)
WAUC_WEIGHTS = {"reference": (2.0, 1.0), "prose": (1.0, 2.0)}


@dataclass
class ScoreSet:
    """Stego-class scores with labels (cover = 0, stego = 1)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise MetricError(f"{self.scores.size} scores for {self.labels.size} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise MetricError("labels must be 0 (cover) or 1 (stego)")

    @property
    def covers(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    @property
    def stegos(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    def require_both(self) -> None:
        if not (self.labels == 0).any() or not (self.labels == 1).any():
            raise MetricError("need at least one cover and one stego sample")


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def thresholds(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between consecutive distinct scores, +inf."""
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2
    return np.concatenate([[-np.inf], mids, [np.inf]])


def pe_min(s: ScoreSet) -> float:
    """min over thresholds of 0.5 * (P_FA + P_MD), "stego" when score > tau."""
    s.require_both()
    cover, stego = np.sort(s.covers), np.sort(s.stegos)
    taus = thresholds(s.scores)
    false_alarms = cover.size - np.searchsorted(cover, taus, side="right")
    misses = np.searchsorted(stego, taus, side="right")
    pe = 0.5 * (false_alarms / cover.size + misses / stego.size)
    return float(pe.min())


def roc(s: ScoreSet) -> RocCurve:
    """Stepwise ROC; tied scores move FP and TP together (a diagonal segment)."""
    s.require_both()
    order = np.argsort(-s.scores, kind="mergesort")
    scores, labels = s.scores[order], s.labels[order]
    tp = np.cumsum(labels == 1)
    fp = np.cumsum(labels == 0)
    # keep the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    return RocCurve(fpr=fpr, tpr=tpr)


def auc(curve: RocCurve) -> float:
    x, y = curve.fpr, curve.tpr
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def _band_area(x: np.ndarray, y: np.ndarray, low: float, high: float) -> float:
    """Integral over fpr of clip(tpr, low, high) - low for a piecewise-linear curve."""
    total = 0.0
    for x0, y0, x1, y1 in zip(x[:-1], y[:-1], x[1:], y[1:]):
        if x1 == x0:
            continue
        knots = [0.0, 1.0]
        if y1 != y0:
            for level in (low, high):
                t = (level - y0) / (y1 - y0)
                if 0.0 < t < 1.0:
                    knots.append(t)
        knots.sort()
        for t0, t1 in zip(knots[:-1], knots[1:]):
            ya = min(max(y0 + t0 * (y1 - y0), low), high) - low
            yb = min(max(y0 + t1 * (y1 - y0), low), high) - low
            total += (t1 - t0) * (x1 - x0) * (ya + yb) / 2
    return total


def wauc(curve: RocCurve, orientation: str = "reference") -> float:
    """Weighted AUC with TPR bands [0, 0.4] and [0.4, 1], normalized to [0, 1].

    ``orientation="reference"`` weights the low-TPR band twice, ``"prose"``
    weights the high-TPR band twice.
    """
    if orientation not in WAUC_WEIGHTS:
        raise MetricError(f"orientation must be one of {sorted(WAUC_WEIGHTS)}, got {orientation!r}")
    weights = WAUC_WEIGHTS[orientation]
    bands = list(zip(WAUC_TPR_THRESHOLDS[:-1], WAUC_TPR_THRESHOLDS[1:]))
    normalization = sum(w * (hi - lo) for w, (lo, hi) in zip(weights, bands))
    score = sum(w * _band_area(curve.fpr, curve.tpr, lo, hi) for w, (lo, hi) in zip(weights, bands))
    return score / normalization


@dataclass
class EvaluationReport:
    pe: float
    auc: float
    wauc: float
    roc: RocCurve
    n_cover: int
    n_stego: int

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("P_E", self.pe),
            ("AUC", self.auc),
            ("WAUC", self.wauc),
            ("n_cover", self.n_cover),
            ("n_stego", self.n_stego),
        ]

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path, roc_path = out_dir / "report.csv", out_dir / "roc.csv"
        with report_path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            writer.writerows(self.rows())
        with roc_path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["fpr", "tpr"])
            writer.writerows(self.roc.points())
        return report_path, roc_path


def evaluate(s: ScoreSet, orientation: str = "reference") -> EvaluationReport:
    curve = roc(s)
    report = EvaluationReport(
        pe=pe_min(s),
        auc=auc(curve),
        wauc=wauc(curve, orientation),
        roc=curve,
        n_cover=int((s.labels == 0).sum()),
        n_stego=int((s.labels == 1).sum()),
    )
    logger.info("P_E=%.4f AUC=%.4f WAUC=%.4f", report.pe, report.auc, report.wauc)
    return report


def summarize_runs(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation across repeated splits."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise MetricError("no runs to summarize")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std
