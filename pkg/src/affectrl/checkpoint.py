"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes  b"AFRLCKPT"
    version  u32
    cfg_len  u32, then cfg_len bytes of UTF-8 JSON (sorted keys)
    n_blocks u32
    per block: u16 name_len, name, u8 ndim, ndim x u32 dims, prod(dims) x f64

Nothing may follow the last block.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .lm import GPT, LmConfig

MAGIC = b"AFRLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_blocks(config: Mapping, blocks: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(dict(config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads_blocks(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if not isinstance(config, dict):
        raise CheckpointError("corrupt checkpoint header: config is not an object")
    (n_blocks,) = struct.unpack("<I", take(4))
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt block name") from None
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(8 * count)), dtype="<f8").astype(np.float64).reshape(shape)
        if name in blocks:
            raise CheckpointError(f"duplicate block {name!r}")
        blocks[name] = arr
    if off != len(view):
        raise CheckpointError("trailing bytes after last block")
    return config, blocks


def save_checkpoint(
    model: GPT,
    path: str | Path,
    extra: Mapping[str, np.ndarray] | None = None,
    meta: Mapping | None = None,
) -> None:
    """Write the LM parameters, then any ``extra`` named blocks; ``meta`` joins the header config."""
    blocks = dict(model.state_dict())
    for k, v in (extra or {}).items():
        if k in blocks:
            raise ValueError(f"extra block {k!r} collides with a model parameter")
        blocks[k] = v
    header = {"lm": model.config.to_dict()}
    for k, v in (meta or {}).items():
        if k == "lm":
            raise ValueError("meta key 'lm' is reserved")
        header[k] = v
    Path(path).write_bytes(dumps_blocks(header, blocks))


def read_checkpoint(path: str | Path) -> tuple[GPT, dict[str, np.ndarray], dict]:
    """Model, extra (non-LM) blocks such as a reward head, and the remaining header fields."""
    config, blocks = loads_blocks(Path(path).read_bytes())
    try:
        lm_cfg = LmConfig(**config["lm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from None
    model = GPT(lm_cfg)
    names = list(model.params)
    missing = [n for n in names if n not in blocks]
    if missing:
        raise CheckpointError(f"checkpoint missing parameter blocks: {missing[:3]}")
    try:
        model.load_state_dict({n: blocks[n] for n in names})
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    extra = {k: v for k, v in blocks.items() if k not in model.params}
    meta = {k: v for k, v in config.items() if k != "lm"}
    return model, extra, meta


def load_checkpoint(path: str | Path) -> GPT:
    return read_checkpoint(path)[0]
