"""Binary checkpoint format.

Layout (all integers little-endian unsigned 32-bit)::

    b"HCNN" | version | meta_len | meta (UTF-8 JSON) | n_records |
    n_records x ( name_len | name (UTF-8) | 4 x dim | float32 values )

``meta`` holds the network config and training metadata (epoch, step,
seed).  Biases are stored with shape ``(out_c, 1, 1, 1)``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    TruncatedCheckpointError,
)
from .network import Network, NetworkConfig, build_network

MAGIC = b"HCNN"
VERSION = 1
_U32 = struct.Struct("<I")


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _record_shape(arr: np.ndarray) -> tuple:
    shape = arr.shape
    return tuple(shape) + (1,) * (4 - len(shape))


def dumps(net: Network, metadata: Optional[dict] = None) -> bytes:
    meta = {"config": net.config.to_dict(), "training": dict(metadata or {})}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta_bytes)), meta_bytes]
    records = list(net.named_arrays())
    parts.append(_U32.pack(len(records)))
    for name, arr in records:
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<4I", *_record_shape(arr)))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path: str | Path, metadata: Optional[dict] = None) -> None:
    """Write ``net`` to ``path`` atomically.

    Values are stored as float32, so a float32 network round-trips bit-exactly.
    """
    atomic_write_bytes(path, dumps(net, metadata))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads(data: bytes, config: Optional[NetworkConfig] = None) -> tuple[Network, dict]:
    r = _Reader(data)
    if len(data) < len(MAGIC) and MAGIC.startswith(data):
        raise TruncatedCheckpointError(f"checkpoint truncated to {len(data)} bytes")
    if data[:4] != MAGIC:
        raise CheckpointFormatError("not an hcnn checkpoint (bad magic string)")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        stored_config = NetworkConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, TruncatedCheckpointError):
            raise
        raise CheckpointFormatError(f"malformed checkpoint header: {exc}") from exc

    net = build_network(config or stored_config, rng=0, dtype=np.float32)
    expected = dict(net.named_arrays())
    n_records = r.u32()
    if n_records != len(expected):
        raise CheckpointShapeError(
            f"checkpoint has {n_records} parameter records, network expects {len(expected)}")
    values = {}
    for _ in range(n_records):
        name = r.take(r.u32()).decode("utf-8")
        shape = struct.unpack("<4I", r.take(16))
        if name not in expected or name in values:
            raise CheckpointShapeError(f"unexpected or repeated parameter {name!r} in checkpoint")
        want = _record_shape(expected[name])
        if shape != want:
            raise CheckpointShapeError(f"{name}: stored shape {shape} != network shape {want}")
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
        values[name] = arr.reshape(expected[name].shape)
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after the last record")
    for name, p in net.params.items():
        p.weight = values[f"{name}.weight"]
        p.bias = values[f"{name}.bias"]
    return net, meta.get("training", {})


def load_checkpoint(path: str | Path, config: Optional[NetworkConfig] = None) -> Network:
    """Read a network; ``config``, when given, overrides the stored one and must match it in shape."""
    return load_checkpoint_with_metadata(path, config)[0]


def load_checkpoint_with_metadata(path: str | Path,
                                  config: Optional[NetworkConfig] = None) -> tuple[Network, dict]:
    return loads(Path(path).read_bytes(), config)
