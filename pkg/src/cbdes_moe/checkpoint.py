"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CBDESMOE"                      8-byte magic
    u32 format_version
    u32 len, bytes                   config snapshot, UTF-8 JSON with sorted keys
    u32 n_entries
    n_entries x (u16 len, name bytes, u32 ndim, ndim x u32 dims)
    u64 payload_len, payload         float64 LE values, manifest order
    u32 crc32(payload)
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .nn import Module

MAGIC = b"CBDESMOE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(config: Dict, arrays: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    buf.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, file length is {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Tuple[Dict, Dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not a CBDESMOE checkpoint")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config snapshot: {exc}") from None
    (n_entries,) = r.unpack("<I", "manifest size")
    manifest: List[Tuple[str, Tuple[int, ...]]] = []
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (ndim,) = r.unpack("<I", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape") if ndim else ()
        manifest.append((name, tuple(shape)))
    (payload_len,) = r.unpack("<Q", "payload length")
    expected = 8 * sum(int(np.prod(s)) for _, s in manifest)
    if payload_len != expected:
        raise CheckpointError(f"payload length {payload_len} does not match manifest ({expected} bytes)")
    payload = r.take(payload_len, "payload")
    (crc,) = r.unpack("<I", "CRC32")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC32 mismatch: checkpoint payload is corrupt")
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after CRC: file length {len(data)}, expected {r.pos}")
    arrays, offset = {}, 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    return config, arrays


def save_checkpoint(path, model: Module, config: Dict) -> None:
    Path(path).write_bytes(_encode(config, model.state_arrays()))


def read_checkpoint(path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(data)


def load_state(model: Module, arrays: Dict[str, np.ndarray]) -> None:
    """Copy ``arrays`` into ``model`` in place; names and shapes must match exactly."""
    target = model.state_arrays()
    missing = set(target) - set(arrays)
    extra = set(arrays) - set(target)
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, dst in target.items():
        src = arrays[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{name}: shape {src.shape} != model shape {dst.shape}")
        np.copyto(dst, src)
