"""Binary checkpoint format.

    b"MCAER1" | uint32 LE header length | UTF-8 JSON header | payload

The header carries the format version, model config, training config, class
table and a tensor index (name, shape, byte offset into the payload). The
payload is the concatenation of little-endian float32 arrays in index order.
Integrity is index-level only; there is no checksum.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointIndexError,
    CheckpointTruncatedError,
)
from .model import CLASS_NAMES, MCAERModel, StreamConfig

MAGIC = b"MCAER1"
VERSION = 1
_F32 = np.dtype("<f4")


def _named_arrays(model: MCAERModel):
    for name, t in model.params.items():
        yield name, t.data
    for name, st in model.buffers.items():
        yield f"{name}.running_mean", st.mean
        yield f"{name}.running_var", st.var


def encode_checkpoint(model: MCAERModel, train_config=None) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in _named_arrays(model):
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "seed": model.seed,
        "train_config": None if train_config is None else train_config.to_dict(),
        "classes": list(CLASS_NAMES),
        "tensors": index,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(model: MCAERModel, path: str | os.PathLike, train_config=None) -> None:
    data = encode_checkpoint(model, train_config)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def decode_header(buf: bytes) -> tuple[dict, int]:
    """Parse and validate the header; returns (header, payload start)."""
    if len(buf) < len(MAGIC) + 4 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not an MCAER checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, len(MAGIC))
    start = len(MAGIC) + 4
    if start + hlen > len(buf):
        raise CheckpointTruncatedError(f"header claims {hlen} bytes, file has {len(buf) - start}")
    try:
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from exc
    if not isinstance(header, dict) or header.get("version") != VERSION:
        got = header.get("version") if isinstance(header, dict) else None
        raise CheckpointFormatError(f"checkpoint version {got!r} not supported (need {VERSION})")
    if header.get("classes") != list(CLASS_NAMES):
        raise CheckpointFormatError(f"class table {header.get('classes')} does not match {list(CLASS_NAMES)}")
    return header, start + hlen


def read_header(path: str | os.PathLike) -> dict:
    return decode_header(Path(path).read_bytes())[0]


def decode_checkpoint(buf: bytes) -> MCAERModel:
    header, pstart = decode_header(buf)
    payload = memoryview(buf)[pstart:]
    try:
        config = StreamConfig.from_dict(header["model_config"])
    except Exception as exc:
        raise CheckpointFormatError(f"bad model config in header: {exc}") from exc
    model = MCAERModel(config, seed=int(header.get("seed", 0)), dtype=np.float32)
    expected = dict((name, arr.shape) for name, arr in _named_arrays(model))
    index = header.get("tensors", [])
    names = [e["name"] for e in index]
    if sorted(names) != sorted(expected) or len(set(names)) != len(names):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CheckpointIndexError(f"tensor index mismatch: missing {missing}, unexpected {extra}")
    pos = 0
    values = {}
    for e in index:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointIndexError(f"{e['name']}: stored shape {shape}, model expects {expected[e['name']]}")
        off = int(e["offset"])
        if off < pos:
            raise CheckpointIndexError(f"{e['name']}: offset {off} overlaps previous tensor ending at {pos}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if off + nbytes > len(payload):
            raise CheckpointTruncatedError(
                f"{e['name']}: needs bytes [{off}, {off + nbytes}) but payload has {len(payload)}"
            )
        values[e["name"]] = np.frombuffer(payload, dtype=_F32, count=nbytes // 4, offset=off).reshape(shape)
        pos = off + nbytes
    for name, t in model.params.items():
        t.data = values[name].astype(np.float32)
    for name, st in model.buffers.items():
        st.mean = values[f"{name}.running_mean"].astype(np.float32)
        st.var = values[f"{name}.running_var"].astype(np.float32)
    return model


def load_checkpoint(path: str | os.PathLike) -> MCAERModel:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_train_config(path: str | os.PathLike) -> Optional[dict]:
    return read_header(path).get("train_config")
