"""Cross-entropy and the sensitivity/specificity weighted cross-entropy.

The weighted loss adds ``alpha * (1 - SP) + beta * (1 - SN)`` to the mean
binary cross-entropy. SN and SP are made differentiable with soft confusion
counts: every window contributes its positive-class probability to TP/FP
and the complement to FN/TN, so thresholding the probabilities recovers the
usual hard-count SN and SP.

All loss arithmetic runs in float64 whatever the logits dtype, since the
probability clamp at ``1 - 1e-7`` is not representable in float32.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-7
DEFAULT_GRID = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.0
    beta: float = 0.0
    epsilon: float = DEFAULT_EPS

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if not 0 < self.epsilon <= 1e-6:
            raise ValueError(f"epsilon must lie in (0, 1e-6], got {self.epsilon}")


@dataclass(frozen=True)
class SoftConfusion:
    tp: float
    fp: float
    tn: float
    fn: float
    sn: float
    sp: float


def _check_batch(y, p):
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.ndim != 1 or y.shape != p.shape:
        raise ValueError(f"labels {y.shape} and probabilities {p.shape} must be equal-length vectors")
    if y.size == 0:
        raise ValueError("empty batch")
    return y, p


def soft_confusion(y, p, epsilon: float = DEFAULT_EPS) -> SoftConfusion:
    y, p = _check_batch(y, p)
    tp = float(np.sum(y * p))
    fn = float(np.sum(y * (1 - p)))
    tn = float(np.sum((1 - y) * (1 - p)))
    fp = float(np.sum((1 - y) * p))
    return SoftConfusion(tp, fp, tn, fn, tp / (tp + fn + epsilon), tn / (tn + fp + epsilon))


def positive_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of class 1 from (N, 2) logits, i.e. sigmoid(z1 - z0)."""
    d = np.asarray(logits, dtype=np.float64)
    d = d[:, 1] - d[:, 0]
    return np.where(d >= 0, 1 / (1 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1 + np.exp(-np.abs(d))))


def _loss_and_dp(y, p_raw, alpha, beta, eps):
    p = np.clip(p_raw, eps, 1 - eps)
    inside = (p_raw > eps) & (p_raw < 1 - eps)
    n = y.size
    ce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    sc = soft_confusion(y, p, eps)
    loss = ce + alpha * (1 - sc.sp) + beta * (1 - sc.sn)
    # tp + fn = sum(y) and tn + fp = sum(1 - y) do not depend on p
    n_pos = np.sum(y)
    n_neg = n - n_pos
    d_p = (-y / p + (1 - y) / (1 - p)) / n
    d_p = d_p + alpha * (1 - y) / (n_neg + eps) - beta * y / (n_pos + eps)
    return loss, np.where(inside, d_p, 0.0)


def cross_entropy(y, p, epsilon: float = DEFAULT_EPS) -> float:
    y, p = _check_batch(y, p)
    return float(_loss_and_dp(y, p, 0.0, 0.0, epsilon)[0])


def sswce(y, p, config: LossConfig) -> float:
    """Weighted loss value for labels ``y`` and positive-class probabilities ``p``."""
    config.validate()
    y, p = _check_batch(y, p)
    return float(_loss_and_dp(y, p, config.alpha, config.beta, config.epsilon)[0])


def sswce_with_grad(y, logits: np.ndarray, config: LossConfig) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the (N, 2) logits."""
    config.validate()
    p_raw = positive_probability(logits)
    y, p_raw = _check_batch(y, p_raw)
    loss, d_p = _loss_and_dp(y, p_raw, config.alpha, config.beta, config.epsilon)
    d_d = d_p * p_raw * (1 - p_raw)
    grad = np.stack([-d_d, d_d], axis=1)
    return float(loss), grad.astype(np.asarray(logits).dtype, copy=False)


# ---------------------------------------------------------------------------
# per-subject grid search


class GridSearchError(RuntimeError):
    def __init__(self, failures: dict):
        self.failures = failures
        lines = "; ".join(f"alpha={a}, beta={b}: {e!r}" for (a, b), e in failures.items())
        super().__init__(f"every grid cell failed: {lines}")


@dataclass
class GridResult:
    best: tuple[float, float]
    cells: dict  # (alpha, beta) -> report
    scores: dict  # (alpha, beta) -> selection score
    failures: dict


def _fp_per_hour(report) -> float:
    return report.fp_per_hour


def _sensitivity(report) -> float:
    s = report.sensitivity
    return -math.inf if s is None or math.isnan(s) else s


def metric_sensitivity(report) -> float:
    return _sensitivity(report)


def metric_sensitivity_at_specificity(min_specificity: float = 99.0) -> Callable:
    """Sensitivity, or -inf when specificity falls below ``min_specificity`` percent."""
    def metric(report):
        sp = report.specificity
        if sp is None or math.isnan(sp) or sp < min_specificity:
            return -math.inf
        return _sensitivity(report)
    return metric


def metric_sensitivity_within_fph(max_fp_per_hour: float) -> Callable:
    """Sensitivity, or -inf when FP/h exceeds ``max_fp_per_hour``."""
    def metric(report):
        if report.fp_per_hour > max_fp_per_hour:
            return -math.inf
        return _sensitivity(report)
    return metric


SELECTION_METRICS = {
    "sensitivity": metric_sensitivity,
    "sensitivity_at_spec99": metric_sensitivity_at_specificity(99.0),
}


def grid_search(train_fn: Callable, candidate_alphas: Sequence[float],
                candidate_betas: Sequence[float], selection_metric) -> GridResult:
    """Evaluate ``train_fn(alpha, beta)`` on every cell and pick the best.

    ``train_fn`` returns a report exposing ``sensitivity``, ``specificity``
    and ``fp_per_hour``. The highest ``selection_metric(report)`` wins; ties
    go to lower FP/h, then higher sensitivity, then smaller alpha + beta.
    Cells that raise are recorded in ``failures``.
    """
    if isinstance(selection_metric, str):
        selection_metric = SELECTION_METRICS[selection_metric]
    if not candidate_alphas or not candidate_betas:
        raise ValueError("candidate grids must be non-empty")
    cells, scores, failures = {}, {}, {}
    for a, b in itertools.product(candidate_alphas, candidate_betas):
        key = (float(a), float(b))
        try:
            report = train_fn(*key)
        except Exception as e:  # a failed cell must not abort the search
            log.warning("grid cell alpha=%s beta=%s failed: %r", a, b, e)
            failures[key] = e
            continue
        cells[key] = report
        scores[key] = selection_metric(report)
    if not cells:
        raise GridSearchError(failures)

    def rank(key):
        r = cells[key]
        return (-scores[key], _fp_per_hour(r), -_sensitivity(r), key[0] + key[1], key)

    best = min(cells, key=rank)
    return GridResult(best, cells, scores, failures)


GRID_CSV_COLUMNS = ("alpha", "beta", "seed", "sensitivity", "specificity",
                    "fp_per_hour", "detected_events", "total_events")


def grid_csv(rows: Sequence[dict]) -> str:
    """Render grid rows (dicts keyed by ``GRID_CSV_COLUMNS``) as CSV text."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=GRID_CSV_COLUMNS, lineterminator="\n",
                       extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in GRID_CSV_COLUMNS})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return v
