"""Flat binary cache of one record's windows.

Layout, little-endian::

    magic "EPWC" | u16 version | u16 id_len | record_id utf-8
    | u32 C | u32 T | u32 n_windows | u32 sample_rate_hz
    | f64 window_s | f64 stride_s | f64 first_start_s | f64 duration_s
    | u16 n_events | n_events * (f64 start_s, f64 end_s)
    then n_windows blocks of: f32[C*T] data | u8 label
"""
from __future__ import annotations

import struct

import numpy as np

from .records import DataError, WindowedRecord

MAGIC = b"EPWC"
VERSION = 1
_GEOM = struct.Struct("<IIIIdddd")


def encode_windows(wr: WindowedRecord) -> bytes:
    n, c, t = wr.windows.shape
    if n > 1 and not np.allclose(np.diff(wr.starts_s), wr.stride_s):
        raise DataError("window cache requires evenly strided windows")
    rid = wr.record_id.encode()
    head = MAGIC + struct.pack("<HH", VERSION, len(rid)) + rid
    first = float(wr.starts_s[0]) if n else 0.0
    head += _GEOM.pack(c, t, n, wr.sample_rate_hz, wr.window_s, wr.stride_s, first,
                       wr.duration_s)
    head += struct.pack("<H", len(wr.seizure_events))
    for s, e in wr.seizure_events:
        head += struct.pack("<dd", s, e)
    block = np.dtype([("x", "<f4", (c * t,)), ("y", "u1")])
    body = np.empty(n, dtype=block)
    body["x"] = wr.windows.reshape(n, c * t)
    body["y"] = wr.labels
    return head + body.tobytes()


def decode_windows(data: bytes) -> WindowedRecord:
    try:
        if data[:4] != MAGIC:
            raise DataError(f"not a window cache (magic {data[:4]!r})")
        version, ln = struct.unpack_from("<HH", data, 4)
        if version != VERSION:
            raise DataError(f"unsupported window cache version {version}")
        off = 8
        rid = data[off:off + ln].decode()
        off += ln
        c, t, n, fs, window_s, stride_s, first, duration = _GEOM.unpack_from(data, off)
        off += _GEOM.size
        (ne,) = struct.unpack_from("<H", data, off)
        off += 2
        events = [struct.unpack_from("<dd", data, off + 16 * k) for k in range(ne)]
        off += 16 * ne
    except struct.error as e:
        raise DataError(f"truncated window cache header: {e}") from None
    block = np.dtype([("x", "<f4", (c * t,)), ("y", "u1")])
    if len(data) - off != n * block.itemsize:
        raise DataError(f"window cache {rid}: expected {n * block.itemsize} payload bytes, "
                        f"found {len(data) - off}")
    body = np.frombuffer(data, dtype=block, count=n, offset=off)
    return WindowedRecord(rid, body["x"].reshape(n, c, t).copy(), body["y"].astype(np.int8),
                          first + stride_s * np.arange(n), window_s, stride_s, duration,
                          [tuple(e) for e in events], fs)


def write_windows(path, wr: WindowedRecord) -> None:
    from ..model import atomic_write
    atomic_write(path, encode_windows(wr))


def read_windows(path) -> WindowedRecord:
    with open(path, "rb") as f:
        return decode_windows(f.read())
