"""Checkpoint serialization.

Little-endian binary layout:

    magic    b"PSNN1"
    version  u32 (currently 1)
    cfg      u32 length + that many bytes of model-config JSON
    tensors  u32 count, then per tensor:
               u32 name length + name bytes (ascii)
               u32 rank, rank * u32 dims
               float64 payload, row-major
    t        u64 optimizer step counter
    crc      u32, CRC32 of every preceding byte

The tensor list carries, in order: trainable parameters, batchnorm state,
optimizer first/second moments (named m.<param> / v.<param>), then any
extra state the caller registered (the trainer stores its RNG state and
epoch counter this way, as byte tensors under train.*).
"""
from __future__ import annotations

import json
import struct
import zlib
from typing import Optional

import numpy as np

from ..errors import FormatError
from .model import ModelConfig, ModelParams, param_shapes

_MAGIC = b"PSNN1"
_VERSION = 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("ascii")
    out = struct.pack("<I", len(nb)) + nb
    out += struct.pack("<I", data.ndim)
    out += struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b""
    return out + data.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def save_checkpoint(path: str, cfg: ModelConfig, mp: ModelParams,
                    extra: Optional[dict] = None) -> None:
    cfg.validate()
    mp.ensure_slots()
    body = _MAGIC + struct.pack("<I", _VERSION)
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode("ascii")
    body += struct.pack("<I", len(cfg_json)) + cfg_json
    tensors = []
    for name, arr in mp.params.items():
        tensors.append((name, arr))
    for name, arr in mp.state.items():
        tensors.append((f"state.{name}", arr))
    for name, arr in mp.m.items():
        tensors.append((f"m.{name}", arr))
    for name, arr in mp.v.items():
        tensors.append((f"v.{name}", arr))
    for name, arr in (extra or {}).items():
        tensors.append((f"extra.{name}", np.asarray(arr, dtype=np.float64)))
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        body += _pack_tensor(name, arr)
    body += struct.pack("<Q", mp.t)
    crc = zlib.crc32(body)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def load_checkpoint(path: str) -> tuple[ModelConfig, ModelParams, dict]:
    """Returns (config, params, extra); every tensor bit-exact as saved."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 8:
        raise FormatError("checkpoint too short to be valid")
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[:-4])
    if stored != actual:
        raise FormatError(
            f"checkpoint CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")
    r = _Reader(blob[:-4])
    if r.take(len(_MAGIC)) != _MAGIC:
        raise FormatError("bad checkpoint magic")
    version = r.u32()
    if version != _VERSION:
        raise FormatError(
            f"checkpoint version {version} unsupported; this build reads"
            f" version {_VERSION}")
    cfg_len = r.u32()
    try:
        cfg_doc = json.loads(r.take(cfg_len).decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad embedded model config: {e}") from e
    cfg = ModelConfig.from_dict(cfg_doc)
    n_tensors = r.u32()
    tensors = {}
    for _ in range(n_tensors):
        name = r.take(r.u32()).decode("ascii")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        tensors[name] = arr
    t = r.u64()
    if r.pos != len(r.buf):
        raise FormatError("checkpoint has trailing bytes before the CRC")

    params, state, m, v, extra = {}, {}, {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("state."):
            state[name[len("state."):]] = arr
        elif name.startswith("m."):
            m[name[len("m."):]] = arr
        elif name.startswith("v."):
            v[name[len("v."):]] = arr
        elif name.startswith("extra."):
            extra[name[len("extra."):]] = arr
        else:
            params[name] = arr
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))[:3]
        surplus = sorted(set(params) - set(expected))[:3]
        raise FormatError(
            f"checkpoint parameters do not match the embedded config"
            f" (missing {missing}, surplus {surplus})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(
                f"checkpoint tensor {name} has shape {params[name].shape},"
                f" config requires {shape}")
    mp = ModelParams(params=params, state=state, m=m, v=v, t=t)
    mp.ensure_slots()
    return cfg, mp, extra
