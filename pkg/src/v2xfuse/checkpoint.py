"""Training state and its versioned binary checkpoint format.

Layout (little-endian)::

    magic "HCFZ" | u16 version | u64 step | u64 seed | u32 meta_len | meta (UTF-8 JSON)
    u32 block_count, then per block:
    u16 name_len | name (UTF-8) | u8 ndim | u32 dims[ndim] | f32 data (row-major)

Parameter blocks are named ``param/<name>``, optimizer moments ``momentum/<name>``.
Blocks are written in sorted name order so identical states give identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthError, MagicError, VersionError
from .model import ModelParams, load_arrays

MAGIC = b"HCFZ"
VERSION = 1
_HEAD = struct.Struct("<4sHQQI")


@dataclass
class TrainState:
    params: ModelParams
    momentum: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)  # model shape knobs: c_bev, depth_bins

    @classmethod
    def fresh(cls, seed: int = 0, c_bev: int = 16, depth_bins: int = 8) -> "TrainState":
        params = ModelParams.init(seed, c_bev, depth_bins)
        momentum = {k: np.zeros_like(v) for k, v in params.trainable().items()}
        return cls(params, momentum, 0, seed, {"c_bev": c_bev, "depth_bins": depth_bins})


def to_bytes(state: TrainState) -> bytes:
    meta = json.dumps(state.meta, sort_keys=True).encode()
    blocks = {f"param/{k}": v for k, v in state.params.arrays().items()}
    blocks.update({f"momentum/{k}": v for k, v in state.momentum.items()})
    parts = [_HEAD.pack(MAGIC, VERSION, state.step, state.seed, len(meta)), meta,
             struct.pack("<I", len(blocks))]
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> TrainState:
    if len(data) < _HEAD.size:
        raise LengthError("checkpoint shorter than its header")
    magic, version, step, seed, meta_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise MagicError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    pos = _HEAD.size
    if pos + meta_len > len(data):
        raise LengthError("checkpoint metadata is truncated")
    try:
        meta = json.loads(data[pos: pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos: pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if pos + 4 * n > len(data):
                raise LengthError(f"block {name} is truncated")
            blocks[name] = np.frombuffer(data, "<f4", n, pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise LengthError(f"checkpoint truncated: {exc}") from exc
    if pos != len(data):
        raise LengthError(f"{len(data) - pos} trailing bytes after last block")
    state = TrainState.fresh(0, int(meta.get("c_bev", 16)), int(meta.get("depth_bins", 8)))
    load_arrays(state.params, {k[6:]: v for k, v in blocks.items() if k.startswith("param/")})
    state.momentum = {k[9:]: v for k, v in blocks.items() if k.startswith("momentum/")}
    state.step, state.seed, state.meta = int(step), int(seed), meta
    return state


def atomic_write(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: TrainState, path):
    atomic_write(path, to_bytes(state))


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
