"""
Line-delimited records: one JSON object per line, floats written with 17
significant digits so they read back bit-exactly.

Files may start with a header record ({"header": true, ...}); it is the only
place a timestamp is allowed, so payload lines of two runs with the same seed
compare byte for byte.
"""
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from utils.errors import RejectedInputError

logger = logging.getLogger(__name__)


def _encode(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"cannot serialize non-finite float {value}")
        text = "%.17g" % value
        # keep a float marker so integral floats read back as floats
        if "." not in text and "e" not in text and "n" not in text:
            text += ".0"
        return text
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_record(record):
    """Serialize one record to a single line (no trailing newline)"""
    return _encode(record)


def header_record(**fields):
    return {"header": True, "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), **fields}


def is_header(record):
    return isinstance(record, dict) and record.get("header") is True


def append_record(handle, record):
    """Write one record and flush, so a crash loses at most the current line"""
    handle.write(dumps_record(record) + "\n")
    handle.flush()


def write_records(path, records, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        if header is not None:
            append_record(handle, header)
        for record in records:
            append_record(handle, record)
    return path


def read_records(path, skip_header=True):
    """
    Read every complete record.

    A final line that does not parse (an interrupted write) is skipped with a
    warning; a bad line anywhere else is an error.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            if number == len(lines):
                logger.warning("skipping truncated final record", extra={"path": str(path), "line": number})
                break
            raise RejectedInputError(f"{path}:{number}: malformed record") from None
        if skip_header and is_header(record):
            continue
        records.append(record)
    return records


def payload_lines(path):
    """Raw payload lines (header excluded), for byte-level comparisons"""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line.strip() and not is_header(json.loads(line))]
