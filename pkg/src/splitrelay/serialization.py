"""Binary encodings shared by checkpoints, the DP cache and the wire.

All integers and reals are little-endian. A tensor is encoded as
``rank:u16, shape:u32*rank, values:f64*prod(shape)`` (row-major).
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .nn import DenseLayer, Segment

CKPT_MAGIC = b"CLWC"
CKPT_VERSION = 1
ACT_CODES = {"identity": 0, "relu": 1}
ACT_NAMES = {v: k for k, v in ACT_CODES.items()}


class FormatError(ValueError):
    pass


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated input: wanted {n} bytes, got {len(data)}")
    return data


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype=np.float64)
    header = struct.pack("<H", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f8").tobytes()


def read_tensor(buf: io.BytesIO) -> np.ndarray:
    (rank,) = struct.unpack("<H", _read(buf, 2))
    shape = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    values = np.frombuffer(_read(buf, 8 * count), dtype="<f8").astype(np.float64)
    return values.reshape(shape)


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    t = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor")
    return t


def encode_segment(segment: Segment) -> bytes:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HH", CKPT_VERSION, len(segment.layers))
    for layer in segment.layers:
        out += struct.pack("<IIB", layer.n_in, layer.n_out, ACT_CODES[layer.activation])
        out += np.ascontiguousarray(layer.weight, dtype="<f8").tobytes()
        out += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
    return bytes(out)


def read_segment(buf: io.BytesIO) -> Segment:
    if _read(buf, 4) != CKPT_MAGIC:
        raise FormatError("not a CLWC checkpoint")
    version, n_layers = struct.unpack("<HH", _read(buf, 4))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        n_in, n_out, code = struct.unpack("<IIB", _read(buf, 9))
        if code not in ACT_NAMES:
            raise FormatError(f"unknown activation code {code}")
        w = np.frombuffer(_read(buf, 8 * n_in * n_out), dtype="<f8").reshape(n_out, n_in)
        b = np.frombuffer(_read(buf, 8 * n_out), dtype="<f8")
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), ACT_NAMES[code]))
    return Segment(layers, frozen=True)


def decode_segment(data: bytes) -> Segment:
    buf = io.BytesIO(data)
    seg = read_segment(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return seg


def save_segment(segment: Segment, path) -> None:
    Path(path).write_bytes(encode_segment(segment))


def load_segment(path) -> Segment:
    """Loaded checkpoints come back frozen; unfreeze explicitly to train further."""
    return decode_segment(Path(path).read_bytes())
