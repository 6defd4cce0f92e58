import json
import logging
import sys
import time

import numpy as np

# Independent random streams, one per purpose
STREAM_INIT = 0
STREAM_TASK = 1
STREAM_TRAIN_DATA = 2
STREAM_ROLLOUT = 3
STREAM_EVAL_DATA = 4
STREAM_EVAL_SAMPLE = 5
STREAM_WARMUP = 6
STREAM_ANALYSIS = 7


def spawn_rng(seed, stream, index=0):
    """
    Derive a generator for one (seed, purpose, index) triple.

    Parameters:
    - seed (int): master seed
    - stream (int): one of the STREAM_* purposes
    - index (int): instance, step or pass index within the stream

    Returns:
    - np.random.Generator: independent of every other triple
    """
    return np.random.default_rng([int(seed), int(stream), int(index)])


class JsonLogFormatter(logging.Formatter):
    """One JSON object per log line, extra fields included"""

    _skip = set(logging.LogRecord("", 0, "", 0, "", (), None).__dict__) | {"message", "asctime"}

    def format(self, record):
        payload = {
            "ts": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(record.created)),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in self._skip:
                payload[key] = value
        if record.exc_info:
            payload["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(level="INFO", log_path=None):
    """
    Route log records to stderr (and optionally a file) as JSON lines.

    Parameters:
    - level (str): logging level name
    - log_path (Path, optional): extra file destination
    """
    root = logging.getLogger()
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    root.handlers.clear()

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    root.addHandler(handler)

    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path, encoding="utf-8")
        file_handler.setFormatter(JsonLogFormatter())
        root.addHandler(file_handler)
