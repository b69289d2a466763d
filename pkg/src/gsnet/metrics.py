"""Grading metrics: biased accuracy, mAP, recall, precision/F1, EVS, MSE, R^2.

Levels are real numbers on a grid (integers by default, or multiples of 0.5
for half-level grading). Class-based metrics map each value to its grid index.

Conventions where the formulas leave room:

* the +-0.5 accuracy term counts ``|pred - true| <= tol`` and so includes exact hits;
* precision and recall are macro-averaged over levels;
* a level that is never predicted has precision 0 and still counts in the mean;
* a level with no ground-truth samples is left out of the recall mean;
* EVS and R^2 are ``None`` when the ground truth has zero variance.
"""

from __future__ import annotations

import io
import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

ALPHA = 0.4
BETA = 0.6
REPORT_KEYS = ("acc", "map", "recall", "precision", "f1", "evs", "mse", "r2")


@dataclass
class EvalSet:
    y: np.ndarray
    y_hat: np.ndarray
    n: int
    step: float = 1.0  # spacing of the level grid: level = index * step

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.y_hat = np.asarray(self.y_hat, dtype=np.float64).ravel()
        if self.y.size == 0:
            raise InputError("evaluation set is empty")
        if self.y.shape != self.y_hat.shape:
            raise InputError(f"{self.y.size} ground-truth values but {self.y_hat.size} predictions")

    @property
    def m(self) -> int:
        return self.y.size

    def indices(self, values: np.ndarray) -> np.ndarray:
        idx = np.rint(values / self.step)
        if np.any(np.abs(idx * self.step - values) > 1e-9) or idx.min() < 0 or idx.max() >= self.n:
            raise InputError(f"levels must lie on the grid 0, {self.step}, ..., {(self.n - 1) * self.step}")
        return idx.astype(np.int64)


@dataclass
class EvalReport:
    acc: float
    map: float
    recall: float
    precision: float
    f1: float
    evs: float | None
    mse: float
    r2: float | None
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in REPORT_KEYS}
        d["confusion"] = self.confusion
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> str:
        fmt = ["" if getattr(self, k) is None else repr(float(getattr(self, k))) for k in REPORT_KEYS]
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(fmt)
        return buf.getvalue()


def confusion_matrix(es: EvalSet) -> np.ndarray:
    """Rows are ground-truth levels, columns predicted levels."""
    cm = np.zeros((es.n, es.n), dtype=np.int64)
    np.add.at(cm, (es.indices(es.y), es.indices(es.y_hat)), 1)
    return cm


def biased_accuracy(es: EvalSet, alpha: float = ALPHA, beta: float = BETA, tol: float = 0.5) -> float:
    if alpha < 0 or beta < 0:
        raise InputError("alpha and beta must be non-negative")
    diff = np.abs(es.y_hat - es.y)
    acc0 = np.mean(diff == 0)
    acc_half = np.mean(diff <= tol + 1e-12)
    return float(alpha * acc0 + beta * acc_half)


def _per_level_precision(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    return np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)


def mean_average_precision(es: EvalSet) -> float:
    return float(_per_level_precision(confusion_matrix(es)).mean())


def recall_rate(es: EvalSet, average: str = "macro") -> float:
    cm = confusion_matrix(es)
    tp = np.diag(cm).astype(np.float64)
    if average == "micro":
        return float(tp.sum() / cm.sum())
    if average != "macro":
        raise InputError(f"average must be 'macro' or 'micro', got {average!r}")
    actual = cm.sum(axis=1)
    present = actual > 0
    return float((tp[present] / actual[present]).mean())


def f1_score(es: EvalSet, average: str = "macro") -> tuple[float, float]:
    """Returns (precision, F1)."""
    cm = confusion_matrix(es)
    if average == "micro":
        p = float(np.trace(cm) / cm.sum())
    else:
        p = float(_per_level_precision(cm).mean())
    re = recall_rate(es, average)
    f1 = 0.0 if p + re == 0 else 2 * p * re / (p + re)
    return p, float(f1)


def explained_variance(es: EvalSet) -> float | None:
    var_y = np.var(es.y)
    if var_y == 0:
        return None
    return float(1.0 - np.var(es.y - es.y_hat) / var_y)


def mean_squared_error(es: EvalSet) -> float:
    return float(np.mean((es.y - es.y_hat) ** 2))


def r2_score(es: EvalSet) -> float | None:
    var_y = np.var(es.y)
    if var_y == 0:
        return None
    return float(1.0 - mean_squared_error(es) / var_y)


def evaluate_all(es: EvalSet, alpha: float = ALPHA, beta: float = BETA, average: str = "macro") -> EvalReport:
    precision, f1 = f1_score(es, average)
    return EvalReport(
        acc=biased_accuracy(es, alpha, beta),
        map=mean_average_precision(es),
        recall=recall_rate(es, average),
        precision=precision,
        f1=f1,
        evs=explained_variance(es),
        mse=mean_squared_error(es),
        r2=r2_score(es),
        confusion=confusion_matrix(es).tolist(),
    )
