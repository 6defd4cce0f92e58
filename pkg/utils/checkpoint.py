"""
Checkpoint files.

Parameter file layout (all integers little-endian):
    b"AVSD" | u32 version | u32 block count
    per block: u16 name length | name (utf-8) | u32 ndim | u32 dims...
    then every block's values as little-endian float64, in declaration order

A sidecar `<name>.meta` text file holds key=value metadata (step, seed and the
run config under `config.`). Optimizer moments go to `<name>.opt`, same layout.
"""
import struct
from pathlib import Path

import numpy as np

from utils.config import build_config, config_to_text, parse_config_text
from utils.errors import CheckpointError, ConfigError
from utils.toy_lm import AdamState, ToyLMParams, block_names

MAGIC = b"AVSD"
FORMAT_VERSION = 1


def write_blocks(path, blocks):
    """Write (name, array) pairs in the binary layout above"""
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blocks))]
    for name, value in blocks:
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)) + encoded)
        header.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
    payload = [np.ascontiguousarray(value, dtype="<f8").tobytes() for _, value in blocks]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(header + payload))


def read_blocks(path):
    """Read a block file back into an ordered {name: array} dict"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        offset = 12
        table = []
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + length].decode("utf-8")
            offset += length
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            table.append((name, shape))
        blocks = {}
        for name, shape in table:
            size = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            blocks[name] = values.reshape(shape).astype(np.float64)
            offset += 8 * size
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path} is truncated or corrupt: {e}") from None
    return blocks


def _sidecar(path, suffix):
    path = Path(path)
    return path.with_name(path.name + suffix)


def save_checkpoint(path, params: ToyLMParams, cfg, step, opt_state: AdamState = None):
    """
    Save params, metadata and (optionally) optimizer state.

    Parameters:
    - path (Path): parameter file; sidecars sit next to it
    - params (ToyLMParams): weights to save
    - cfg (TrainConfig): run config, written to the metadata file
    - step (int): training steps completed
    - opt_state (AdamState, optional): Adam moments for exact resumption
    """
    write_blocks(path, params.blocks())
    meta = [f"step={int(step)}", f"seed={cfg.seed}"]
    if opt_state is not None:
        write_blocks(_sidecar(path, ".opt"),
                     [(f"m.{n}", v) for n, v in opt_state.m.blocks()]
                     + [(f"v.{n}", v) for n, v in opt_state.v.blocks()])
        meta.append(f"adam_t={opt_state.t}")
    meta.extend(f"config.{line}" for line in config_to_text(cfg).splitlines())
    _sidecar(path, ".meta").write_text("\n".join(meta) + "\n", encoding="utf-8")
    return Path(path)


def load_checkpoint(path):
    """
    Load a checkpoint written by save_checkpoint.

    Returns:
    - tuple: (ToyLMParams, TrainConfig, step, AdamState or None)
    """
    blocks = read_blocks(path)
    names = block_names()
    if list(blocks) != names:
        raise CheckpointError(f"{path}: expected blocks {names}, found {list(blocks)}")
    params = ToyLMParams(**blocks)

    meta_path = _sidecar(path, ".meta")
    if not meta_path.exists():
        raise CheckpointError(f"missing metadata file {meta_path}")
    try:
        meta = parse_config_text(meta_path.read_text(encoding="utf-8"))
        cfg = build_config({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    except ConfigError as e:
        raise CheckpointError(f"{meta_path}: {e}") from None
    step = int(meta.get("step", 0))

    opt_state = None
    opt_path = _sidecar(path, ".opt")
    if "adam_t" in meta and opt_path.exists():
        moments = read_blocks(opt_path)
        opt_state = AdamState(
            m=ToyLMParams(**{n: moments[f"m.{n}"] for n in names}),
            v=ToyLMParams(**{n: moments[f"v.{n}"] for n in names}),
            t=int(meta["adam_t"]),
        )
    return params, cfg, step, opt_state
