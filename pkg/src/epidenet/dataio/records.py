from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Recording:
    """Multichannel EEG in microvolts plus seizure annotations in seconds."""

    record_id: str
    sample_rate_hz: int
    labels: list[str]
    signals: np.ndarray  # (channels, samples)
    seizure_events: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.signals = np.asarray(self.signals)
        if self.signals.ndim != 2:
            raise DataError(f"{self.record_id}: signals must be (channels, samples)")
        if len(self.labels) != self.signals.shape[0]:
            raise DataError(f"{self.record_id}: {len(self.labels)} labels for "
                            f"{self.signals.shape[0]} channels")
        if self.sample_rate_hz <= 0 or int(self.sample_rate_hz) != self.sample_rate_hz:
            raise DataError(f"{self.record_id}: sample rate must be a positive integer")
        self.sample_rate_hz = int(self.sample_rate_hz)
        self.seizure_events = [(float(s), float(e)) for s, e in self.seizure_events]
        validate_events(self.seizure_events, self.duration_s, self.record_id)

    @property
    def n_samples(self) -> int:
        return self.signals.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz


def validate_events(events, duration_s: Optional[float], where: str = "") -> None:
    prev_end = -np.inf
    for s, e in events:
        if not s < e:
            raise DataError(f"{where}: event ({s}, {e}) has start >= end")
        if s < 0 or (duration_s is not None and e > duration_s + 1e-9):
            raise DataError(f"{where}: event ({s}, {e}) outside [0, {duration_s}]")
        if s < prev_end:
            raise DataError(f"{where}: events overlap or are unsorted near ({s}, {e})")
        prev_end = e


@dataclass
class LabeledWindow:
    data: np.ndarray  # (C, T)
    label: int
    record_id: str
    start_s: float


@dataclass
class WindowedRecord:
    """All windows of one record as arrays, with what event scoring needs."""

    record_id: str
    windows: np.ndarray  # (n, C, T) float32
    labels: np.ndarray  # (n,) int8
    starts_s: np.ndarray  # (n,)
    window_s: float
    stride_s: float
    duration_s: float
    seizure_events: list[tuple[float, float]]
    sample_rate_hz: int

    @property
    def has_seizure(self) -> bool:
        return len(self.seizure_events) > 0


@dataclass
class RecordSet:
    """One subject's records, already windowed."""

    subject: str
    records: list[WindowedRecord]

    @property
    def total_hours(self) -> float:
        return sum(r.duration_s for r in self.records) / 3600.0

    @property
    def seizure_record_ids(self) -> list[str]:
        return sorted(r.record_id for r in self.records if r.has_seizure)

    def by_id(self, record_id: str) -> WindowedRecord:
        for r in self.records:
            if r.record_id == record_id:
                return r
        raise KeyError(record_id)
