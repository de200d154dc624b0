"""Versioned binary checkpoints.

Layout, all little-endian::

    b"VFMC" | u32 version | u32 header length | JSON header | f64 payload

The header carries the run config, the step counters and one entry per
array (``group``, ``name``, ``shape``, ``offset`` in bytes from the start of
the payload). Arrays are stored as raw float64, so a save/load round trip is
bit-exact.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import ConfigError, FormatError
from .config import RunConfig
from .train import Checkpoint

MAGIC = b"VFMC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def to_bytes(ckpt):
    entries, blobs, offset = [], [], 0
    for group, arrays in (("params", ckpt.params), ("optimizer", ckpt.optimizer)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "optimizer_step": ckpt.optimizer_step,
        "payload_bytes": offset,
        "entries": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)


def from_bytes(buf):
    buf = bytes(buf)
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for a checkpoint prefix", len(buf))
    magic, version, head_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = _PREFIX.size
    if start + head_len > len(buf):
        raise FormatError(f"header length {head_len} runs past the end of the file", 8)
    try:
        header = json.loads(buf[start:start + head_len].decode())
        config = RunConfig.from_dict(header["config"])
        entries = header["entries"]
        payload_bytes = int(header["payload_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", start) from exc
    base = start + head_len
    if len(buf) - base != payload_bytes:
        raise FormatError(f"payload is {len(buf) - base} bytes, header declares {payload_bytes}",
                          min(len(buf), base + payload_bytes))
    groups = {"params": {}, "optimizer": {}}
    for entry in entries:
        shape = tuple(int(n) for n in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        at = base + int(entry["offset"])
        if entry.get("group") not in groups or at < base or at + 8 * count > len(buf):
            raise FormatError(f"entry {entry.get('name')!r} lies outside the payload", at)
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=at)
        groups[entry["group"]][entry["name"]] = arr.reshape(shape).astype(np.float64)
    return Checkpoint(config, groups["params"], groups["optimizer"],
                      int(header["optimizer_step"]), int(header["step"]))


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
