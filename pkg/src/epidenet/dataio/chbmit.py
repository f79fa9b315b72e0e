"""CHB-MIT ``chbNN-summary.txt`` parsing and subject loading."""
from __future__ import annotations

import os
import re

from .records import DataError, validate_events

_FILE = re.compile(r"^\s*File Name:\s*(\S+)", re.I)
_COUNT = re.compile(r"^\s*Number of Seizures in File:\s*(\d+)", re.I)
_START = re.compile(r"^\s*Seizure(?:\s+\d+)?\s+Start Time:\s*([\d.]+)\s*seconds", re.I)
_END = re.compile(r"^\s*Seizure(?:\s+\d+)?\s+End Time:\s*([\d.]+)\s*seconds", re.I)


def parse_chbmit_summary(text: str) -> dict[str, list[tuple[float, float]]]:
    """Map each listed file name (without extension) to its seizure events."""
    out: dict[str, list] = {}
    declared: dict[str, int] = {}
    current = None
    pending_start = None

    def close(name):
        if name is None:
            return
        if pending_start is not None:
            raise DataError(f"stanza {name}: seizure start without end")
        if name not in declared:
            raise DataError(f"stanza {name}: missing 'Number of Seizures in File'")
        if declared[name] != len(out[name]):
            raise DataError(f"stanza {name}: declares {declared[name]} seizures, "
                            f"found {len(out[name])}")
        validate_events(out[name], None, f"stanza {name}")

    for line in text.splitlines():
        if m := _FILE.match(line):
            close(current)
            current = os.path.splitext(m.group(1))[0]
            if current in out:
                raise DataError(f"stanza {current} listed twice")
            out[current] = []
            pending_start = None
            continue
        if current is None:
            continue
        if m := _COUNT.match(line):
            declared[current] = int(m.group(1))
        elif m := _START.match(line):
            if pending_start is not None:
                raise DataError(f"stanza {current}: two starts without an end")
            pending_start = float(m.group(1))
        elif m := _END.match(line):
            if pending_start is None:
                raise DataError(f"stanza {current}: seizure end without start")
            out[current].append((pending_start, float(m.group(1))))
            pending_start = None
    close(current)
    return out
