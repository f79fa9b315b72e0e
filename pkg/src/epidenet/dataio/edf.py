"""Reader and writer for 16-bit EDF files.

Only plain EDF signal data is handled; "EDF Annotations" signals are
skipped. Samples are mapped to physical units with the linear map given by
each signal's digital and physical extremes.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .records import DataError, Recording


class EDFError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# per-signal header fields: (name, width)
_SIGNAL_FIELDS = (
    ("label", 16), ("transducer", 80), ("physical_dimension", 8),
    ("physical_min", 8), ("physical_max", 8), ("digital_min", 8), ("digital_max", 8),
    ("prefiltering", 80), ("samples_per_record", 8), ("reserved", 32),
)


@dataclass
class EDFSignalHeader:
    label: str
    physical_dimension: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int

    @property
    def is_annotation(self) -> bool:
        return self.label.strip().lower() == "edf annotations"

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        gain = (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)
        return (digital.astype(np.float64) - self.digital_min) * gain + self.physical_min


def _field(raw: bytes, off: int, width: int) -> str:
    return raw[off:off + width].decode("ascii", errors="replace").strip()


def _number(raw: bytes, off: int, width: int, kind, what: str):
    text = _field(raw, off, width)
    try:
        return kind(float(text)) if kind is int else kind(text)
    except ValueError:
        raise EDFError(f"cannot parse {what} from {text!r}", off) from None


def parse_edf(data: bytes, record_id: str = "edf") -> Recording:
    """Decode an EDF byte string into a :class:`Recording` (physical units)."""
    if len(data) < 256:
        raise EDFError("file shorter than the 256-byte fixed header", len(data))
    if _field(data, 0, 8) != "0":
        raise EDFError(f"unsupported version field {_field(data, 0, 8)!r}", 0)
    header_bytes = _number(data, 184, 8, int, "header size")
    n_records = _number(data, 236, 8, int, "number of data records")
    record_duration = _number(data, 244, 8, float, "data record duration")
    ns = _number(data, 252, 4, int, "number of signals")
    if ns < 1:
        raise EDFError(f"number of signals must be positive, got {ns}", 252)
    if header_bytes != 256 * (ns + 1):
        raise EDFError(f"header size {header_bytes} != 256 * (1 + {ns} signals)", 184)
    if len(data) < header_bytes:
        raise EDFError("file ends inside the signal header", len(data))
    if record_duration <= 0:
        raise EDFError(f"data record duration must be positive, got {record_duration}", 244)

    cols = {}
    off = 256
    for name, width in _SIGNAL_FIELDS:
        cols[name] = [(off + i * width, width) for i in range(ns)]
        off += ns * width

    signals = []
    for i in range(ns):
        def num(key, kind):
            o, w = cols[key][i]
            return _number(data, o, w, kind, f"{key} of signal {i}")
        sig = EDFSignalHeader(
            label=_field(data, *cols["label"][i]),
            physical_dimension=_field(data, *cols["physical_dimension"][i]),
            physical_min=num("physical_min", float),
            physical_max=num("physical_max", float),
            digital_min=num("digital_min", int),
            digital_max=num("digital_max", int),
            samples_per_record=num("samples_per_record", int),
        )
        if sig.samples_per_record < 1:
            raise EDFError(f"signal {i} has {sig.samples_per_record} samples per record",
                           cols["samples_per_record"][i][0])
        if not sig.is_annotation:
            if sig.physical_min == sig.physical_max:
                raise EDFError(f"signal {i} ({sig.label}) has physical_min == physical_max",
                               cols["physical_min"][i][0])
            if sig.digital_min >= sig.digital_max:
                raise EDFError(f"signal {i} ({sig.label}) has digital_min >= digital_max",
                               cols["digital_min"][i][0])
        signals.append(sig)

    record_size = 2 * sum(s.samples_per_record for s in signals)
    payload = len(data) - header_bytes
    if n_records == -1:
        n_records = payload // record_size
    if n_records < 0:
        raise EDFError(f"invalid number of data records {n_records}", 236)
    if payload < n_records * record_size:
        bad = payload // record_size
        raise EDFError(f"data record {bad} truncated: payload holds {payload} bytes, "
                       f"{n_records} records need {n_records * record_size}",
                       header_bytes + bad * record_size)
    if payload > n_records * record_size:
        raise EDFError(f"{payload - n_records * record_size} bytes beyond the last data record",
                       header_bytes + n_records * record_size)

    raw = np.frombuffer(data, dtype="<i2", count=n_records * record_size // 2,
                        offset=header_bytes).reshape(n_records, record_size // 2)
    keep = [i for i, s in enumerate(signals) if not s.is_annotation]
    if not keep:
        raise EDFError("file holds no ordinary signals", 256)
    rates = {signals[i].samples_per_record for i in keep}
    if len(rates) != 1:
        raise EDFError(f"signals have differing samples per record {sorted(rates)}", 256)
    rate = signals[keep[0]].samples_per_record / record_duration
    if abs(rate - round(rate)) > 1e-9:
        raise EDFError(f"non-integer sample rate {rate}", 244)

    bounds = np.cumsum([0] + [s.samples_per_record for s in signals])
    out = np.empty((len(keep), n_records * signals[keep[0]].samples_per_record))
    for row, i in enumerate(keep):
        out[row] = signals[i].to_physical(raw[:, bounds[i]:bounds[i + 1]].reshape(-1))
    return Recording(record_id, int(round(rate)), [signals[i].label for i in keep], out)


def read_edf(path, record_id=None) -> Recording:
    with open(path, "rb") as f:
        data = f.read()
    if record_id is None:
        record_id = os.path.splitext(os.path.basename(path))[0]
    return parse_edf(data, record_id)


def _pad(text, width: int) -> bytes:
    b = str(text).encode("ascii")
    if len(b) > width:
        raise ValueError(f"{text!r} does not fit in {width} header bytes")
    return b.ljust(width, b" ")


def _num_text(x: float, width: int = 8) -> str:
    for digits in range(width, 0, -1):
        s = f"{x:.{digits}g}"
        if len(s) <= width:
            return s
    raise ValueError(f"{x} does not fit in {width} characters")


def _directed_text(x: float, up: bool, width: int = 8) -> str:
    """Shortest-fitting decimal text that is >= x (``up``) or <= x."""
    for d in range(width, -1, -1):
        q = 10.0 ** d
        v = (math.ceil(x * q) if up else math.floor(x * q)) / q
        s = f"{v:.{d}f}"
        if len(s) <= width and (float(s) >= x if up else float(s) <= x):
            return s
    raise ValueError(f"{x} does not fit in {width} characters")


def write_edf(rec: Recording, record_duration_s: float = 1.0) -> bytes:
    """Encode ``rec`` as EDF with full-range 16-bit digital values per channel.

    The written physical extremes are the header-text renderings of the
    signal range, so readers recover each sample to within one digital step.
    """
    spr = rec.sample_rate_hz * record_duration_s
    if abs(spr - round(spr)) > 1e-9:
        raise ValueError("record duration must hold a whole number of samples")
    spr = int(round(spr))
    n_records = -(-rec.n_samples // spr)
    ns = len(rec.labels)
    dmin, dmax = -32768, 32767
    head = (_pad("0", 8) + _pad("X X X X", 80) + _pad("Startdate X X X X", 80)
            + _pad("01.01.00", 8) + _pad("00.00.00", 8) + _pad(256 * (ns + 1), 8)
            + _pad("", 44) + _pad(n_records, 8) + _pad(_num_text(record_duration_s), 8)
            + _pad(ns, 4))
    pmins, pmaxs = [], []
    for ch in rec.signals:
        lo, hi = float(np.min(ch)), float(np.max(ch))
        if hi == lo:
            lo, hi = lo - 1.0, hi + 1.0
        plo, phi = float(_directed_text(lo, False)), float(_directed_text(hi, True))
        pmins.append(plo)
        pmaxs.append(phi)
    fields = {
        "label": rec.labels, "transducer": [""] * ns, "physical_dimension": ["uV"] * ns,
        "physical_min": [_num_text(v) for v in pmins],
        "physical_max": [_num_text(v) for v in pmaxs],
        "digital_min": [dmin] * ns, "digital_max": [dmax] * ns,
        "prefiltering": [""] * ns, "samples_per_record": [spr] * ns, "reserved": [""] * ns,
    }
    for name, width in _SIGNAL_FIELDS:
        head += b"".join(_pad(v, width) for v in fields[name])

    total = n_records * spr
    dig = np.zeros((ns, total), dtype="<i2")
    for i, ch in enumerate(rec.signals):
        gain = (dmax - dmin) / (pmaxs[i] - pmins[i])
        d = np.round((ch - pmins[i]) * gain + dmin)
        dig[i, :rec.n_samples] = np.clip(d, dmin, dmax)
    body = dig.reshape(ns, n_records, spr).transpose(1, 0, 2).tobytes()
    return head + body
