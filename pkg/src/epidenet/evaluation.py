"""Window-level and event-level seizure scoring.

Event rules:

* a true seizure counts as detected when at least one positive window
  overlaps the event widened by ``tolerance_s`` on both sides;
* positive windows overlapping no (widened) seizure are false alarms, and
  each maximal run of consecutive false-alarm windows is one false-positive
  event. FP/h is the number of such runs per monitored hour.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_TOLERANCE_S = 30.0


def majority_smooth(raw_labels) -> np.ndarray:
    """Causal three-window majority vote.

    Window i is positive iff at least two of raw[max(0, i-2) .. i] are
    positive. The first window only has one vote and is therefore always
    negative; a 1-1 tie over the first two windows resolves to positive
    only when both are positive.
    """
    r = np.asarray(raw_labels, dtype=np.int64)
    if r.ndim != 1:
        raise ValueError("need a 1-D label track")
    votes = r.copy()
    votes[1:] += r[:-1]
    votes[2:] += r[:-2]
    return (votes >= 2).astype(np.int8)


@dataclass
class WindowMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def sensitivity(self) -> float:
        """Percent; NaN when the track has no positive windows."""
        d = self.tp + self.fn
        return 100.0 * self.tp / d if d else math.nan

    @property
    def specificity(self) -> float:
        d = self.tn + self.fp
        return 100.0 * self.tn / d if d else math.nan


def window_metrics(pred_labels, true_labels) -> WindowMetrics:
    pred = np.asarray(pred_labels).astype(bool)
    true = np.asarray(true_labels).astype(bool)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    return WindowMetrics(int(np.sum(pred & true)), int(np.sum(pred & ~true)),
                         int(np.sum(~pred & ~true)), int(np.sum(~pred & true)))


@dataclass
class PredictionTrack:
    record_id: str
    window_starts_s: np.ndarray
    raw_labels: np.ndarray
    hop_s: float
    duration_h: float
    window_s: Optional[float] = None  # defaults to hop_s
    smoothed_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.window_starts_s = np.asarray(self.window_starts_s, dtype=np.float64)
        self.raw_labels = np.asarray(self.raw_labels, dtype=np.int8)
        if self.window_s is None:
            self.window_s = self.hop_s
        if self.window_starts_s.shape != self.raw_labels.shape:
            raise ValueError("one label per window start required")
        if self.window_starts_s.size > 1:
            steps = np.diff(self.window_starts_s)
            if not np.allclose(steps, self.hop_s, rtol=0, atol=1e-9):
                raise ValueError("window starts must advance by a constant hop_s")

    def smoothed(self) -> "PredictionTrack":
        return PredictionTrack(self.record_id, self.window_starts_s, self.raw_labels,
                               self.hop_s, self.duration_h, self.window_s,
                               majority_smooth(self.raw_labels))

    def labels(self, smoothed: bool) -> np.ndarray:
        if smoothed:
            if self.smoothed_labels is None:
                return majority_smooth(self.raw_labels)
            return self.smoothed_labels
        return self.raw_labels


@dataclass
class EventResult:
    detected: frozenset  # indices into the event list
    fp_runs: int
    fp_per_hour: float
    total_events: int
    ends_in_fp_run: bool  # last window is a false alarm (for chunked scoring)

    @property
    def detected_events(self) -> int:
        return len(self.detected)


def _overlaps(starts, window_s, lo, hi):
    return (starts < hi) & (starts + window_s > lo)


def event_metrics(track: PredictionTrack, events: Sequence[tuple[float, float]],
                  tolerance_s: float = DEFAULT_TOLERANCE_S, smoothed: bool = False,
                  continues_fp_run: bool = False) -> EventResult:
    """Detected seizures and false-positive runs for one record.

    ``continues_fp_run`` marks that the preceding chunk of the same record
    ended inside a false-positive run, so a run starting at this chunk's
    first window is not counted twice.
    """
    if not track.duration_h > 0:
        raise ValueError("track duration must be positive")
    labels = track.labels(smoothed).astype(bool)
    starts = track.window_starts_s
    near_event = np.zeros(labels.shape, dtype=bool)
    detected = set()
    for k, (s, e) in enumerate(events):
        hit = _overlaps(starts, track.window_s, s - tolerance_s, e + tolerance_s)
        near_event |= hit
        if np.any(hit & labels):
            detected.add(k)
    false_alarm = labels & ~near_event
    run_starts = false_alarm.copy()
    run_starts[1:] &= ~false_alarm[:-1]
    if continues_fp_run and false_alarm.size:
        run_starts[0] = False
    runs = int(run_starts.sum())
    return EventResult(frozenset(detected), runs, runs / track.duration_h, len(events),
                       bool(false_alarm.size and false_alarm[-1]))


def merge_event_results(parts: Sequence[EventResult], duration_h: float) -> EventResult:
    """Combine results of contiguous chunks of one record scored in order."""
    detected = frozenset().union(*(p.detected for p in parts))
    runs = sum(p.fp_runs for p in parts)
    return EventResult(detected, runs, runs / duration_h, parts[0].total_events,
                       parts[-1].ends_in_fp_run)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    tp: float
    fp: float
    tn: float
    fn: float
    sensitivity: float  # percent, NaN if undefined
    specificity: float
    fp_per_hour: float
    detected_events: float
    total_events: float
    smoothed: bool
    record_ids: tuple = ()
    seed: Optional[int] = None
    flags: tuple = field(default_factory=tuple)

    @property
    def detected_fraction(self) -> float:
        return self.detected_events / self.total_events if self.total_events else math.nan


def evaluate_track(track: PredictionTrack, true_labels, events,
                   tolerance_s: float = DEFAULT_TOLERANCE_S, smoothed: bool = False,
                   seed: Optional[int] = None) -> EvalReport:
    labels = track.labels(smoothed)
    wm = window_metrics(labels, true_labels)
    ev = event_metrics(track, events, tolerance_s, smoothed=smoothed)
    flags = []
    if wm.tp + wm.fn == 0:
        flags.append("sensitivity_undefined")
    if wm.tn + wm.fp == 0:
        flags.append("specificity_undefined")
    return EvalReport(wm.tp, wm.fp, wm.tn, wm.fn, wm.sensitivity, wm.specificity,
                      ev.fp_per_hour, ev.detected_events, ev.total_events, smoothed,
                      (track.record_id,), seed, tuple(flags))


def _nanmean(values, weights):
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    ok = ~np.isnan(v)
    if not ok.any():
        return math.nan
    return float(np.sum(v[ok] * w[ok]) / np.sum(w[ok]))


def aggregate(reports: Sequence[EvalReport], weights: Optional[Sequence[float]] = None,
              tally: str = "sum") -> EvalReport:
    """Weighted mean of rates and counts across reports.

    Event tallies are summed (``tally="sum"``, e.g. across folds) or
    averaged (``tally="mean"``, e.g. across seeds of one fold). Mixing
    smoothed and raw reports is rejected.
    """
    if not reports:
        raise ValueError("need at least one report")
    if len({r.smoothed for r in reports}) != 1:
        raise ValueError("cannot aggregate smoothed and unsmoothed reports together")
    if tally not in ("sum", "mean"):
        raise ValueError("tally must be 'sum' or 'mean'")
    w = np.ones(len(reports)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(reports),):
        raise ValueError("one weight per report required")

    def mean(attr):
        return _nanmean([getattr(r, attr) for r in reports], w)

    if tally == "sum":
        detected = float(sum(r.detected_events for r in reports))
        total = float(sum(r.total_events for r in reports))
    else:
        detected, total = mean("detected_events"), mean("total_events")
    ids = tuple(dict.fromkeys(i for r in reports for i in r.record_ids))
    seeds = {r.seed for r in reports}
    flags = tuple(sorted({f for r in reports for f in r.flags}))
    return EvalReport(mean("tp"), mean("fp"), mean("tn"), mean("fn"),
                      mean("sensitivity"), mean("specificity"), mean("fp_per_hour"),
                      detected, total, reports[0].smoothed, ids,
                      seeds.pop() if len(seeds) == 1 else None, flags)


def aggregate_loocv(per_fold: Sequence[Sequence[EvalReport]]) -> tuple[list, EvalReport]:
    """Mean over seeds within each fold, then unweighted mean over folds.

    Returns (fold aggregates, overall aggregate).
    """
    folds = [aggregate(seed_reports, tally="mean") for seed_reports in per_fold if seed_reports]
    if not folds:
        raise ValueError("no successful runs to aggregate")
    return folds, aggregate(folds, tally="sum")


REPORT_CSV_COLUMNS = ("subject", "fold", "held_out", "seed", "alpha", "beta", "smoothed",
                      "tp", "fp", "tn", "fn", "sensitivity", "specificity", "fp_per_hour",
                      "detected_events", "total_events", "status")


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return v


def reports_csv(rows: Sequence[dict]) -> str:
    """CSV text, one row per fold x seed (x smoothing mode)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_CSV_COLUMNS, lineterminator="\n",
                       extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k, "")) for k in REPORT_CSV_COLUMNS})
    return buf.getvalue()


def report_row(report: EvalReport, **extra) -> dict:
    row = asdict(report)
    row.update(extra)
    return row


def format_table(rows: Sequence[tuple[str, EvalReport, EvalReport]]) -> str:
    """Table rows ``name  Sens  Spec  FP/h  detected`` with smoothed values in parentheses.

    Each row is (name, raw report, smoothed report); the detected-seizure
    tally is taken from the smoothed report.
    """
    head = f"{'':<14}{'Sens. [%]':>18}{'Spec. [%]':>18}{'FP/h':>16}{'# Detected':>14}"
    lines = [head]
    for name, raw, sm in rows:
        def pair(a, b, fmt="{:.2f}"):
            return f"{fmt.format(a)} ({fmt.format(b)})"
        det = f"{sm.detected_events:g}/{sm.total_events:g}"
        lines.append(f"{name:<14}{pair(raw.sensitivity, sm.sensitivity):>18}"
                     f"{pair(raw.specificity, sm.specificity):>18}"
                     f"{pair(raw.fp_per_hour, sm.fp_per_hour):>16}{det:>14}")
    return "\n".join(lines)
