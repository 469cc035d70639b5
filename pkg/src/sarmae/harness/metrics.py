"""Evaluation metrics. All accumulation is float64 / int64 and order-invariant."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


class ConfusionMatrix:
    """Global confusion counts over an evaluation set, rows = truth, cols = prediction."""

    def __init__(self, num_classes: int = 11):
        self.k = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, true) -> None:
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        true = np.asarray(true).reshape(-1).astype(np.int64)
        if pred.shape != true.shape:
            raise ValueError(f"pred/true size mismatch: {pred.size} vs {true.size}")
        for name, arr in (("pred", pred), ("true", true)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.k):
                raise ValueError(f"{name} class ids must lie in [0, {self.k})")
        self.counts += np.bincount(true * self.k + pred, minlength=self.k * self.k).reshape(self.k, self.k)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where a class has zero union."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        out = np.full(self.k, np.nan)
        present = union > 0
        out[present] = tp[present] / union[present]
        return out

    def miou(self) -> float:
        # exact rational mean of integer-count IoUs, rounded once
        tp = np.diag(self.counts)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        ious = [Fraction(int(t), int(u)) for t, u in zip(tp, union) if u > 0]
        if not ious:
            raise ValueError("mIoU undefined: no class has a nonzero union")
        return float(sum(ious) / len(ious))

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.counts.sum(), 1))


def miou(pred_classes, true_classes, num_classes: int = 11) -> tuple[list[float | None], float]:
    """(per-class IoU with None for absent classes, mean over present classes)."""
    cm = ConfusionMatrix(num_classes)
    cm.update(pred_classes, true_classes)
    per_class = cm.iou()
    return [None if np.isnan(v) else float(v) for v in per_class], cm.miou()


def rmse_metric(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size != t.size or p.size == 0:
        raise ValueError(f"rmse needs equal non-empty lengths, got {p.size} and {t.size}")
    d = p - t
    return float(np.sqrt(np.dot(d, d) / d.size))


@dataclass
class OlsFit:
    slope: float
    intercept: float
    r2: float

    def predict(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept


def ols_fit(x, y) -> OlsFit:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size or x.size < 2:
        raise ValueError("ols_fit needs two equal-length samples with n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    if sxx == 0.0:
        raise ValueError("ols_fit: x has zero variance")
    slope = float(np.dot(xc, yc)) / sxx
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.dot(yc, yc))
    resid = y - (slope * x + intercept)
    r2 = 0.0 if ss_tot == 0.0 else 1.0 - float(np.dot(resid, resid)) / ss_tot
    return OlsFit(slope, intercept, r2)


def write_correlation_data(targets, preds, path, label: str = "") -> OlsFit:
    """CSV of (target, prediction, fitted) points plus a JSON sidecar with the fit."""
    fit = ols_fit(targets, preds)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fitted = fit.predict(targets)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "prediction", "ols_fit"])
        for t, p, f in zip(np.asarray(targets).reshape(-1), np.asarray(preds).reshape(-1), fitted):
            writer.writerow([repr(float(t)), repr(float(p)), repr(float(f))])
    meta = {"label": label, "slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2, "n": int(len(fitted))}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return fit
