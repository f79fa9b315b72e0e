"""Synthetic scalp-EEG subjects with annotated spike-wave seizures.

Background activity is 1/f ("pink") noise, independent per channel.
Seizures are 2.7-3.3 Hz spike-and-wave bursts, identical in timing on all
channels and sharing one per-subject channel gain pattern, whose RMS is ``snr`` times the
background RMS. Optional short seizure-like transients (``artifacts``) are
inserted away from seizures; they are not annotated and act as the kind of
isolated false alarm a detector must learn to tolerate.

Every record draws from its own child seed, so records can be generated in
any order or in parallel with identical results.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .preprocess import TEMPORAL_MONTAGE, LabelRule, windowize_record
from .records import DataError, Recording, RecordSet


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 1
    records_per_subject: int = 4
    record_duration_s: float = 1800.0
    seizures_per_subject: int = 6
    seizure_duration_s: tuple = (30.0, 90.0)
    snr: float = 2.0
    sample_rate_hz: int = 256
    channels: tuple = TEMPORAL_MONTAGE
    background_uv: float = 30.0
    artifacts_per_hour: float = 0.0
    artifact_duration_s: tuple = (1.0, 2.5)
    # clearance between seizures, record edges and artifacts
    min_gap_s: float = 60.0
    seed: int = 0

    def validate(self) -> None:
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        if self.n_subjects < 1 or self.records_per_subject < 1:
            raise ValueError("need at least one subject and one record")
        if self.seizures_per_subject < 0:
            raise ValueError("seizures_per_subject must be >= 0")
        lo, hi = self.seizure_duration_s
        if not 0 < lo <= hi:
            raise ValueError(f"bad seizure duration range {self.seizure_duration_s}")
        a_lo, a_hi = self.artifact_duration_s
        if not 0 < a_lo <= a_hi:
            raise ValueError(f"bad artifact duration range {self.artifact_duration_s}")
        if self.artifacts_per_hour < 0 or self.background_uv <= 0:
            raise ValueError("artifact rate must be >= 0 and background amplitude > 0")
        if self.record_duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("record duration and sample rate must be positive")
        if len(self.channels) < 1:
            raise ValueError("need at least one channel")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for k in ("seizure_duration_s", "artifact_duration_s", "channels"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class SynthSubject:
    subject: str
    recordings: list
    record_seeds: list
    artifacts: dict = field(default_factory=dict)  # record_id -> [(start, end)]


def pink_noise(rng: np.random.Generator, n_channels: int, n: int, fs: float) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum (flat below 0.5 Hz)."""
    white = rng.standard_normal((n_channels, n))
    spec = np.fft.rfft(white, axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec *= 1.0 / np.sqrt(np.maximum(f, 0.5))
    x = np.fft.irfft(spec, n=n, axis=-1)
    x -= x.mean(axis=-1, keepdims=True)
    return x / x.std(axis=-1, keepdims=True)


def spike_wave(t: np.ndarray, freq: float) -> np.ndarray:
    """Unit-RMS spike-and-wave train: sharp negative spike then a slow positive wave."""
    phase = (t * freq) % 1.0
    spike = -np.exp(-0.5 * ((phase - 0.12) / 0.025) ** 2)
    wave = 0.6 * np.exp(-0.5 * ((phase - 0.5) / 0.12) ** 2)
    x = spike + wave
    x = x - x.mean()
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return env


def _channel_gains(rng, n_channels):
    return rng.uniform(0.6, 1.0, n_channels) * rng.choice([-1.0, 1.0], n_channels)


def _burst(rng, gains, n, fs, amplitude, ramp_s):
    t = np.arange(n) / fs
    freq = rng.uniform(2.7, 3.3)
    w = spike_wave(t, freq) * _envelope(n, int(ramp_s * fs))
    return amplitude * gains[:, None] * w[None, :]


def _place_seizures(rng, durations, record_s, gap):
    """One slot per seizure; each seizure lands uniformly inside its slot."""
    m = len(durations)
    if m == 0:
        return []
    slot = record_s / m
    events = []
    for k, d in enumerate(durations):
        lo = k * slot + gap
        hi = (k + 1) * slot - gap - d
        if hi < lo:
            raise DataError(f"cannot place {m} seizures of up to {max(durations):.0f} s "
                            f"in a {record_s:.0f} s record with {gap:.0f} s clearance")
        s = rng.uniform(lo, hi)
        events.append((round(s, 3), round(s + d, 3)))
    return events


def _place_artifacts(rng, count, record_s, durations, events, gap):
    out = []
    for k in range(count):
        d = durations[k]
        for _ in range(50):
            s = rng.uniform(0, record_s - d)
            clear = all(s + d <= a - gap or s >= b + gap for a, b in events)
            clear = clear and all(s + d <= a or s >= b for a, b in out)
            if clear:
                out.append((s, s + d))
                break
    return sorted(out)


def synth_dataset(spec: SynthSpec) -> list[SynthSubject]:
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    subjects = []
    fs = spec.sample_rate_hz
    n = int(round(spec.record_duration_s * fs))
    for si, sub_seq in enumerate(root.spawn(spec.n_subjects)):
        plan_seq, rec_seq = sub_seq.spawn(2)
        plan = np.random.default_rng(plan_seq)
        order = plan.permutation(spec.records_per_subject)
        focus = _channel_gains(plan, len(spec.channels))
        counts = np.zeros(spec.records_per_subject, dtype=int)
        for k in range(spec.seizures_per_subject):
            counts[order[k % spec.records_per_subject]] += 1
        name = f"synth{si:02d}"
        recs, seeds, artifacts = [], [], {}
        for ri, seq in enumerate(rec_seq.spawn(spec.records_per_subject)):
            rng = np.random.default_rng(seq)
            rid = f"{name}_{ri:02d}"
            x = pink_noise(rng, len(spec.channels), n, fs)
            durations = rng.uniform(*spec.seizure_duration_s, size=counts[ri])
            events = _place_seizures(rng, list(durations), spec.record_duration_s, spec.min_gap_s)
            for s, e in events:
                i0, i1 = int(round(s * fs)), int(round(e * fs))
                x[:, i0:i1] += _burst(rng, focus, i1 - i0, fs, spec.snr, 2.0)
            n_art = rng.poisson(spec.artifacts_per_hour * spec.record_duration_s / 3600.0)
            art_d = rng.uniform(*spec.artifact_duration_s, size=n_art)
            arts = _place_artifacts(rng, n_art, spec.record_duration_s, art_d, events,
                                    spec.min_gap_s)
            for s, e in arts:
                i0, i1 = int(round(s * fs)), int(round(e * fs))
                gains = _channel_gains(rng, x.shape[0])
                x[:, i0:i1] += _burst(rng, gains, i1 - i0, fs, spec.snr, 0.2)
            artifacts[rid] = [(round(s, 3), round(e, 3)) for s, e in arts]
            recs.append(Recording(rid, fs, list(spec.channels), x * spec.background_uv, events))
            seeds.append(int(seq.generate_state(1, np.uint64)[0]))
        subjects.append(SynthSubject(name, recs, seeds, artifacts))
    return subjects


def synth_record_sets(spec: SynthSpec, window_s: float = 4.0, stride_s: float = None,
                      label_rule: LabelRule = LabelRule()) -> list[RecordSet]:
    return [RecordSet(s.subject, [windowize_record(r, window_s, stride_s, label_rule)
                                  for r in s.recordings])
            for s in synth_dataset(spec)]


def manifest(spec: SynthSpec, subjects: Sequence[SynthSubject]) -> str:
    """Deterministic JSON text describing the generated dataset."""
    doc = {
        "spec": asdict(spec),
        "total_hours": sum(r.duration_s for s in subjects for r in s.recordings) / 3600.0,
        "subjects": [
            {
                "subject": s.subject,
                "records": [
                    {"record_id": r.record_id, "seed": seed, "duration_s": r.duration_s,
                     "sample_rate_hz": r.sample_rate_hz, "channels": r.labels,
                     "seizure_events": [list(e) for e in r.seizure_events],
                     "artifacts": [list(a) for a in s.artifacts.get(r.record_id, [])]}
                    for r, seed in zip(s.recordings, s.record_seeds)
                ],
            }
            for s in subjects
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
