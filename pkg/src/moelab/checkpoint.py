"""Binary checkpoint container.

Layout::

    b"RISEMOE1"                   8-byte magic
    uint64 little-endian          length of the JSON header in bytes
    JSON header (UTF-8)           {"config": {...}, "arrays": [{"name", "shape", "dtype"}]}
    array payloads                in header order, row-major, little-endian

Parameters are float64 ("<f8"); the pruning mask is stored as uint8 ("|u1").
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .model import PARAM_NAMES, ModelConfig, MoeModel

MAGIC = b"RISEMOE1"
_LEN = struct.Struct("<Q")


def to_bytes(model: MoeModel) -> bytes:
    arrays = [(name, np.ascontiguousarray(getattr(model, name), dtype="<f8")) for name in PARAM_NAMES]
    arrays.append(("pruned", np.ascontiguousarray(model.pruned, dtype="|u1")))
    header = {
        "config": asdict(model.config),
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.str} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, _LEN.pack(len(blob)), blob] + [a.tobytes() for _, a in arrays])


def from_bytes(data: bytes) -> MoeModel:
    if data[:8] != MAGIC:
        raise InputError("not a checkpoint (bad magic)")
    if len(data) < 16:
        raise InputError("truncated checkpoint header")
    (n,) = _LEN.unpack_from(data, 8)
    try:
        header = json.loads(data[16 : 16 + n].decode())
        config = ModelConfig(**header["config"])
        specs = header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"malformed checkpoint header: {exc}") from exc
    offset = 16 + n
    arrays = {}
    for spec in specs:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(data):
            raise InputError(f"truncated checkpoint payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(spec["shape"])
        offset = end
    if offset != len(data):
        raise InputError("trailing bytes after checkpoint payload")
    missing = (set(PARAM_NAMES) | {"pruned"}) - set(arrays)
    if missing:
        raise InputError(f"checkpoint lacks arrays: {sorted(missing)}")
    try:
        return MoeModel(
            config=config,
            pruned=arrays["pruned"].astype(bool),
            **{name: arrays[name].astype(np.float64) for name in PARAM_NAMES},
        )
    except ConfigError as exc:
        raise InputError(f"checkpoint does not describe a valid model: {exc}") from exc


def save_checkpoint(model: MoeModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path) -> MoeModel:
    return from_bytes(Path(path).read_bytes())
