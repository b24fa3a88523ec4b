"""Binary wire format for inter-node BEV feature messages.

Layout (little-endian, no padding, 36-byte header)::

    offset size type    field
    0      4    bytes   magic "HCFM"
    4      2    u16     version (1)
    6      2    u16     node_id
    8      1    u8      sensor_set code (bit 0 lidar, bit 1 camera)
    9      1    u8      scale s_n
    10     2    u16     reserved, must be 0
    12     4    u32     B
    16     4    u32     C
    20     4    u32     H
    24     4    u32     W
    28     8    u64     frame timestamp, microseconds
    36     4*B*C*H*W    f32 payload, row-major (width fastest)

A 1x1x1x1 message carrying 1.0 from node 0, sensor code 0, scale 1,
timestamp 0 is the header above followed by ``00 00 80 3f``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import LengthError, MagicError, VersionError

MAGIC = b"HCFM"
VERSION = 1
HEADER = struct.Struct("<4sHHBBHIIIIQ")


@dataclass(frozen=True)
class MessageMeta:
    node_id: int = 0
    sensor_code: int = 0
    scale: int = 1
    timestamp_us: int = 0


def encode_message(f: np.ndarray, meta: MessageMeta) -> bytes:
    arr = np.asarray(f)
    if arr.ndim != 4:
        raise ValueError(f"feature map must be 4-D, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite values")
    b, c, h, w = arr.shape
    header = HEADER.pack(MAGIC, VERSION, meta.node_id, meta.sensor_code, meta.scale, 0,
                         b, c, h, w, meta.timestamp_us)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_message(data: bytes):
    """Returns (feature map, MessageMeta); raises a DecodeError subclass on bad input."""
    if len(data) < HEADER.size:
        raise LengthError(f"message of {len(data)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, node_id, code, scale, _, b, c, h, w, ts = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    expected = HEADER.size + 4 * b * c * h * w
    if len(data) != expected:
        raise LengthError(f"expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(b, c, h, w)
    return arr.astype(np.float32), MessageMeta(node_id, code, scale, ts)
