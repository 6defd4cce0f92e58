import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from utils.errors import CheckpointError, RejectedInputError
from utils.records import header_record, read_records, write_records
from utils.signal_core import as_logdist
from utils.task_synth import instance_from_record, instance_to_record

logger = logging.getLogger(__name__)

# log-sum-exp drift accepted silently, and the most that ingest will repair
NORM_EXACT = 1e-6
NORM_REPAIRABLE = 1e-3


@lru_cache(maxsize=8)
def _read_dataset(path, mtime_ns):
    return tuple(instance_from_record(r) for r in read_records(path))


def load_dataset(path):
    """Load task instances, cached per file version"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {path}")
    instances = list(_read_dataset(str(path), path.stat().st_mtime_ns))
    logger.info("loaded dataset", extra={"path": str(path), "instances": len(instances)})
    return instances


def write_dataset(path, instances, cfg):
    header = header_record(kind="dataset", modulus=cfg.modulus, chain_length=cfg.chain_length,
                           seed=cfg.seed, count=len(instances))
    return write_records(path, (instance_to_record(i) for i in instances), header=header)


def check_vocabulary(instances, vocab_size):
    """Every instance must use exactly the model's vocabulary"""
    for instance in instances:
        if instance.vocab_size != vocab_size:
            raise CheckpointError(
                f"instance {instance.id} needs a vocabulary of {instance.vocab_size} tokens, "
                f"checkpoint has {vocab_size}")


def load_metrics(path):
    """Metrics stream as a DataFrame, one row per step"""
    df = pd.DataFrame(read_records(path))
    if not df.empty:
        df = df.set_index("step", drop=False)
    return df


@dataclass
class PoolInput:
    id: object
    position: int
    student_logp: np.ndarray
    view_logps: np.ndarray
    weights: Optional[np.ndarray] = None


@dataclass
class PoolError:
    id: object
    position: Optional[int]
    error: str


@dataclass
class IngestStats:
    records: int = 0
    renormalized: int = 0
    errors: int = 0


def _ingest_row(values, label, stats):
    """Return a floored, normalized float64 row; small drift is renormalized and counted"""
    row = np.asarray(values, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise RejectedInputError(f"{label} must be a nonempty flat array")
    if np.any(np.isnan(row)) or np.any(row == np.inf):
        raise RejectedInputError(f"{label} contains NaN or +inf")
    drift = abs(float(logsumexp(row)))
    if drift > NORM_REPAIRABLE:
        raise RejectedInputError(f"{label} log-sum-exp is off by {drift:.3e}")
    if drift > NORM_EXACT:
        stats.renormalized += 1
    return as_logdist(row).logp


def parse_pool_record(record, stats):
    """
    Validate one PoolRecord.

    Returns:
    - PoolInput, or PoolError when lengths disagree or a row is not normalized
    """
    rid = record.get("id") if isinstance(record, dict) else None
    position = record.get("position") if isinstance(record, dict) else None
    try:
        if not isinstance(record, dict):
            raise RejectedInputError("record is not an object")
        student = _ingest_row(record["student_logp"], "student_logp", stats)
        views = record["view_logps"]
        if not views:
            raise RejectedInputError("view_logps is empty")
        rows = [_ingest_row(v, f"view_logps[{m}]", stats) for m, v in enumerate(views)]
        sizes = {student.size} | {r.size for r in rows}
        if len(sizes) > 1:
            raise RejectedInputError(f"array lengths disagree: {sorted(sizes)}")
        weights = record.get("weights")
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (len(rows),):
                raise RejectedInputError(f"expected {len(rows)} weights, got {weights.size}")
        return PoolInput(id=rid, position=int(position or 0), student_logp=student,
                         view_logps=np.stack(rows), weights=weights)
    except KeyError as e:
        return PoolError(id=rid, position=position, error=f"missing field {e}")
    except (RejectedInputError, TypeError, ValueError) as e:
        return PoolError(id=rid, position=position, error=str(e))


def load_pool_records(path, stats=None):
    """Yield PoolInput or PoolError per record, in file order"""
    stats = stats if stats is not None else IngestStats()
    for record in read_records(path):
        stats.records += 1
        parsed = parse_pool_record(record, stats)
        if isinstance(parsed, PoolError):
            stats.errors += 1
            logger.warning("rejected pool record", extra={"id": parsed.id, "error": parsed.error})
        yield parsed
