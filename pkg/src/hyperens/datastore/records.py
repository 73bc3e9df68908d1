"""Append-only JSON-lines result ledger.

Writers take an exclusive advisory lock around each append, so concurrent
trial workers never interleave partial lines. Readers tolerate a torn final
line left by a crash.
"""

import fcntl
import json
import logging
import math
import os
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


def _encode(value):
    # JSON has no inf/nan literals in strict mode; spell them out
    if isinstance(value, float) and not math.isfinite(value):
        return {"__float__": repr(value)}
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if hasattr(value, "tolist"):
        return _encode(value.tolist())
    return value


def _decode(value):
    if isinstance(value, dict):
        if set(value) == {"__float__"}:
            return float(value["__float__"])
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def records_append(path, *records):
    """Append one JSON object per record, holding an exclusive lock."""
    lines = "".join(json.dumps(_encode(r), allow_nan=False, sort_keys=True) + "\n" for r in records)
    with open(path, "a", encoding="utf-8") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            f.write(lines)
            f.flush()
            os.fsync(f.fileno())
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


@dataclass
class ScanResult:
    records: list = field(default_factory=list)
    malformed: int = 0
    truncated_tail: bool = False


def records_scan(path):
    """Read every complete record in order.

    A final line without a newline is treated as a crash-torn write and
    dropped; malformed complete lines are skipped and counted.
    """
    result = ScanResult()
    if not os.path.exists(path):
        return result
    with open(path, encoding="utf-8", errors="replace") as f:
        fcntl.flock(f, fcntl.LOCK_SH)
        try:
            text = f.read()
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)
    lines = text.split("\n")
    tail = lines.pop()
    if tail.strip():
        result.truncated_tail = True
        log.warning("%s: ignoring truncated final line", path)
    for line in lines:
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            result.malformed += 1
            continue
        if not isinstance(obj, dict):
            result.malformed += 1
            continue
        result.records.append(_decode(obj))
    if result.malformed:
        log.warning("%s: skipped %d malformed lines", path, result.malformed)
    return result


def repair(path):
    """Truncate a torn final line so later appends start on a fresh line."""
    if not os.path.exists(path):
        return
    with open(path, "r+b") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            data = f.read()
            if data and not data.endswith(b"\n"):
                f.truncate(data.rfind(b"\n") + 1)
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)
