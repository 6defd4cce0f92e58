"""
Run configuration: plain-text key=value files with dotted keys for nesting.

    # comment
    method=avsd
    views_used=full_solution,partial_solution,final_answer
    task.modulus=7
    optim.lr=0.01

Every key maps onto a field of TrainConfig or one of its nested sections. Unknown
keys and out-of-range values raise ConfigError naming the key.
"""
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from utils.errors import ConfigError

VIEW_KINDS = ("full_solution", "partial_solution", "final_answer", "own_attempt_plus_reference")
OPERATORS = ("add", "sub", "mul")
METHODS = ("avsd", "opsd", "consensus_only", "arithmetic_only")

# token ids below this are reserved for special, operator and marker tokens
RESERVED_TOKENS = 12

SEED_ENV = "AVSD_SEED"


@dataclass(frozen=True)
class TaskConfig:
    modulus: int = 7
    chain_length: int = 3
    operators: Tuple[str, ...] = ("add",)
    partial_fraction: float = 0.5
    seed: int = 7
    count: int = 1000

    @property
    def vocab_size(self):
        return RESERVED_TOKENS + self.modulus


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 0  # 0: take it from the task
    width: int = 16
    hidden: int = 64
    window: int = 8
    init_scale: float = 0.08


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 1.0


@dataclass(frozen=True)
class TrainConfig:
    method: str = "avsd"
    views_used: Tuple[str, ...] = ("full_solution", "partial_solution", "final_answer")
    steps: int = 2000
    batch_size: int = 16
    rollout_temperature: float = 0.7
    max_len: int = 4
    epsilon: float = 1e-8
    normalize_by_length: Optional[bool] = None
    seed: int = 0
    eval_every: int = 200
    eval_k: int = 8
    eval_instances: int = 200
    eval_temperature: float = 0.6
    checkpoint_every: int = 0
    gate_tau: float = 0.5
    gate_override: Optional[float] = None
    warmup_steps: int = 0
    warmup_lr: float = 1e-2
    warmup_min_accuracy: float = 0.0
    workers: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    @property
    def length_normalized(self):
        """OPSD averages over the rollout length, the pooled objectives sum"""
        if self.normalize_by_length is None:
            return self.method == "opsd"
        return self.normalize_by_length

    @property
    def model_config(self):
        if self.model.vocab_size:
            return self.model
        return dataclasses.replace(self.model, vocab_size=self.task.vocab_size)


def _coerce(key, raw, tp):
    """Convert a raw string to the annotated field type"""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.strip().lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(key, raw, inner)
    if origin in (tuple, Tuple):
        return tuple(item.strip() for item in raw.split(",") if item.strip())
    try:
        if tp is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(key, f"cannot read {raw!r} as {getattr(tp, '__name__', tp)}") from None


def parse_config_text(text):
    """
    Read key=value lines into a flat dict of dotted keys.

    Blank lines and lines starting with '#' are ignored.
    """
    pairs = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}", "expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _build(cls, pairs, prefix=""):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        dotted = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(hints[f.name]):
            nested = {k: v for k, v in pairs.items() if k.startswith(dotted + ".")}
            kwargs[f.name] = _build(hints[f.name], nested, dotted + ".")
        elif dotted in pairs:
            kwargs[f.name] = _coerce(dotted, pairs[dotted], hints[f.name])
    return cls(**kwargs)


def _known_keys(cls, prefix=""):
    hints = typing.get_type_hints(cls)
    keys = set()
    for f in dataclasses.fields(cls):
        if dataclasses.is_dataclass(hints[f.name]):
            keys |= _known_keys(hints[f.name], f"{prefix}{f.name}.")
        else:
            keys.add(f"{prefix}{f.name}")
    return keys


def build_config(pairs):
    """Turn dotted key/value pairs into a validated TrainConfig"""
    unknown = sorted(set(pairs) - _known_keys(TrainConfig))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    cfg = _build(TrainConfig, pairs)
    validate_config(cfg)
    return cfg


def with_seed(cfg, seed):
    """Override the master seed and the task seed"""
    return dataclasses.replace(cfg, seed=seed, task=dataclasses.replace(cfg.task, seed=seed))


def load_config(path=None, seed=None):
    """
    Load a config file (defaults when path is None) and apply seed overrides.

    AVSD_SEED in the environment overrides the file; an explicit seed
    argument overrides both.
    """
    pairs = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("--config", f"no such file: {path}")
        pairs = parse_config_text(path.read_text(encoding="utf-8"))
    cfg = build_config(pairs)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and seed is None:
        seed = _coerce(SEED_ENV, env_seed, int)
    if seed is not None:
        cfg = with_seed(cfg, seed)
    return cfg


def _require(condition, key, message):
    if not condition:
        raise ConfigError(key, message)


def validate_task(task, prefix="task."):
    _require(task.modulus >= 5, prefix + "modulus", "must be at least 5")
    _require(task.chain_length >= 2, prefix + "chain_length", "must be at least 2")
    _require(len(task.operators) >= 1 and set(task.operators) <= set(OPERATORS),
             prefix + "operators", f"must be a nonempty subset of {OPERATORS}")
    _require(0.0 < task.partial_fraction < 1.0, prefix + "partial_fraction", "must lie in (0, 1)")
    _require(task.count >= 0, prefix + "count", "must be nonnegative")


def validate_config(cfg: TrainConfig):
    """Raise ConfigError on the first invalid field"""
    validate_task(cfg.task)
    _require(cfg.method in METHODS, "method", f"must be one of {METHODS}")
    unknown_views = [v for v in cfg.views_used if v not in VIEW_KINDS]
    _require(not unknown_views, "views_used", f"unknown view kinds {unknown_views}")
    if cfg.method == "opsd":
        _require(len(cfg.views_used) == 1, "views_used", "opsd takes exactly one view")
    else:
        _require(len(cfg.views_used) >= 2, "views_used", f"{cfg.method} needs at least two views")
    _require(cfg.steps >= 0, "steps", "must be nonnegative")
    _require(cfg.batch_size >= 1, "batch_size", "must be at least 1")
    _require(cfg.rollout_temperature > 0, "rollout_temperature", "must be positive")
    _require(cfg.eval_temperature >= 0, "eval_temperature", "must be nonnegative")
    _require(cfg.max_len >= 1, "max_len", "must be at least 1")
    _require(cfg.epsilon > 0, "epsilon", "must be positive")
    _require(cfg.eval_every >= 0, "eval_every", "must be nonnegative")
    _require(cfg.eval_k >= 1, "eval_k", "must be at least 1")
    _require(cfg.eval_instances >= 1, "eval_instances", "must be at least 1")
    _require(cfg.checkpoint_every >= 0, "checkpoint_every", "must be nonnegative")
    _require(0.0 <= cfg.gate_tau <= 1.0, "gate_tau", "must lie in [0, 1]")
    if cfg.gate_override is not None:
        _require(0.0 <= cfg.gate_override <= 1.0, "gate_override", "must lie in [0, 1]")
    _require(cfg.warmup_steps >= 0, "warmup_steps", "must be nonnegative")
    _require(cfg.warmup_lr > 0, "warmup_lr", "must be positive")
    _require(0.0 <= cfg.warmup_min_accuracy <= 1.0, "warmup_min_accuracy", "must lie in [0, 1]")
    _require(cfg.workers >= 1, "workers", "must be at least 1")
    model = cfg.model
    _require(model.vocab_size == 0 or model.vocab_size >= cfg.task.vocab_size,
             "model.vocab_size", f"must be 0 or at least {cfg.task.vocab_size}")
    for name in ("width", "hidden", "window"):
        _require(getattr(model, name) >= 1, f"model.{name}", "must be at least 1")
    _require(model.init_scale > 0, "model.init_scale", "must be positive")
    optim = cfg.optim
    _require(optim.lr > 0, "optim.lr", "must be positive")
    _require(0.0 <= optim.beta1 < 1.0, "optim.beta1", "must lie in [0, 1)")
    _require(0.0 <= optim.beta2 < 1.0, "optim.beta2", "must lie in [0, 1)")
    _require(optim.eps > 0, "optim.eps", "must be positive")
    if optim.clip_norm is not None:
        _require(optim.clip_norm > 0, "optim.clip_norm", "must be positive")


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg, prefix=""):
    """Render a config as key=value lines that build_config reads back"""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            lines.append(config_to_text(value, f"{prefix}{f.name}."))
        else:
            lines.append(f"{prefix}{f.name}={_format_value(value)}")
    return "\n".join(lines)
