"""Channel selection, anti-aliased decimation and windowing."""
from __future__ import annotations

import glob
import math
import os
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal

from .records import DataError, LabeledWindow, Recording, RecordSet, WindowedRecord

TEMPORAL_MONTAGE = ("F7-T7", "T7-P7", "F8-T8", "T8-P8")

# Chebyshev type I, order 8, 0.05 dB ripple, passband edge at 0.8 x new Nyquist
FILTER_ORDER = 8
FILTER_RIPPLE_DB = 0.05
CUTOFF_FRACTION = 0.8


def _norm(label: str) -> str:
    return label.strip().lower()


def select_channels(rec: Recording, wanted: Sequence[str]) -> Recording:
    """Keep ``wanted`` channels in that order; matching ignores case and padding.

    A wanted label also matches a duplicate-suffixed label such as
    ``T8-P8-0`` when no exact match exists.
    """
    index = {}
    for i, label in enumerate(rec.labels):
        index.setdefault(_norm(label), i)
    rows = []
    missing = []
    for w in wanted:
        key = _norm(w)
        if key in index:
            rows.append(index[key])
            continue
        suffixed = [i for lab, i in index.items() if re.fullmatch(re.escape(key) + r"-\d+", lab)]
        if suffixed:
            rows.append(min(suffixed))
        else:
            missing.append(w)
    if missing:
        raise DataError(f"{rec.record_id}: channels {missing} not found; "
                        f"available: {rec.labels}")
    return Recording(rec.record_id, rec.sample_rate_hz, [rec.labels[i] for i in rows],
                     rec.signals[rows], rec.seizure_events)


def antialias_sos(factor: int) -> np.ndarray:
    """Low-pass sections, rescaled to unit gain at DC.

    An even-order Chebyshev I filter sits at the bottom of its ripple at DC;
    without the rescale a constant signal would lose 0.05 dB per pass.
    """
    sos = signal.cheby1(FILTER_ORDER, FILTER_RIPPLE_DB, CUTOFF_FRACTION / factor, output="sos")
    _, h = signal.sosfreqz(sos, worN=[0.0])
    sos[0, :3] /= abs(h[0])
    return sos


def decimate(rec: Recording, factor: int) -> Recording:
    """Zero-phase low-pass, then keep every ``factor``-th sample.

    Event times are in seconds and carry over unchanged.
    """
    if int(factor) != factor or factor < 1:
        raise DataError(f"decimation factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return rec
    if rec.sample_rate_hz % factor:
        raise DataError(f"{rec.record_id}: rate {rec.sample_rate_hz} Hz not divisible by {factor}")
    filtered = signal.sosfiltfilt(antialias_sos(factor), rec.signals, axis=-1)
    return Recording(rec.record_id, rec.sample_rate_hz // factor, list(rec.labels),
                     filtered[:, ::factor], rec.seizure_events)


@dataclass(frozen=True)
class LabelRule:
    min_overlap: float = 0.5  # fraction of the window that must be seizure


def _integral(x: float, what: str) -> int:
    if abs(x - round(x)) > 1e-9:
        raise DataError(f"{what} = {x} is not a whole number of samples")
    return int(round(x))


def window_bounds(n_samples: int, win: int, stride: int) -> np.ndarray:
    if win > n_samples:
        return np.zeros(0, dtype=np.int64)
    return np.arange((n_samples - win) // stride + 1, dtype=np.int64) * stride


def overlap_seconds(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def window_labels(starts_s: np.ndarray, window_s: float, events, rule: LabelRule) -> np.ndarray:
    labels = np.zeros(len(starts_s), dtype=np.int8)
    for k, s in enumerate(starts_s):
        covered = sum(overlap_seconds(s, s + window_s, a, b) for a, b in events)
        labels[k] = covered >= rule.min_overlap * window_s - 1e-9
    return labels


def windowize(rec: Recording, window_s: float, stride_s: float,
              label_rule: LabelRule = LabelRule()) -> list[LabeledWindow]:
    wr = windowize_record(rec, window_s, stride_s, label_rule)
    return [LabeledWindow(x, int(y), rec.record_id, float(s))
            for x, y, s in zip(wr.windows, wr.labels, wr.starts_s)]


def windowize_record(rec: Recording, window_s: float, stride_s: float = None,
                     label_rule: LabelRule = LabelRule()) -> WindowedRecord:
    """Cut ``rec`` into windows; a trailing partial window is dropped."""
    stride_s = window_s if stride_s is None else stride_s
    win = _integral(window_s * rec.sample_rate_hz, "window_s * rate")
    stride = _integral(stride_s * rec.sample_rate_hz, "stride_s * rate")
    if win < 1 or stride < 1:
        raise DataError("window and stride must be at least one sample")
    offs = window_bounds(rec.n_samples, win, stride)
    if offs.size:
        view = np.lib.stride_tricks.sliding_window_view(rec.signals, win, axis=1)
        windows = view[:, offs].transpose(1, 0, 2).astype(np.float32)
    else:
        windows = np.zeros((0, rec.signals.shape[0], win), np.float32)
    starts = offs / rec.sample_rate_hz
    return WindowedRecord(rec.record_id, windows,
                          window_labels(starts, window_s, rec.seizure_events, label_rule),
                          starts, float(window_s), float(stride_s), rec.duration_s,
                          list(rec.seizure_events), rec.sample_rate_hz)


def load_edf_subject(edf_dir: str, summary_path: str, subject: str = None,
                     channels: Sequence[str] = TEMPORAL_MONTAGE, target_rate_hz: int = 256,
                     window_s: float = 4.0, stride_s: float = None,
                     label_rule: LabelRule = LabelRule()) -> RecordSet:
    """Load every EDF listed in a CHB-MIT summary into a windowed :class:`RecordSet`."""
    from .chbmit import parse_chbmit_summary
    from .edf import read_edf

    with open(summary_path) as f:
        events = parse_chbmit_summary(f.read())
    records = []
    for path in sorted(glob.glob(os.path.join(edf_dir, "*.edf"))):
        rid = os.path.splitext(os.path.basename(path))[0]
        if rid not in events:
            continue
        rec = read_edf(path, rid)
        rec = Recording(rid, rec.sample_rate_hz, rec.labels, rec.signals, events[rid])
        rec = select_channels(rec, channels)
        if rec.sample_rate_hz != target_rate_hz:
            factor = rec.sample_rate_hz / target_rate_hz
            if factor != math.floor(factor):
                raise DataError(f"{rid}: cannot decimate {rec.sample_rate_hz} Hz "
                                f"to {target_rate_hz} Hz")
            rec = decimate(rec, int(factor))
        records.append(windowize_record(rec, window_s, stride_s, label_rule))
    if not records:
        raise DataError(f"no EDF files in {edf_dir} are listed in {summary_path}")
    return RecordSet(subject or os.path.basename(os.path.normpath(edf_dir)), records)
