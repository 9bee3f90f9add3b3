"""The TUV1 volume container.

Layout, all integers little-endian::

    magic     4 bytes   b"TUV1"
    version   u32       1
    channels  u32
    dims      u32 x 3   D, H, W
    dtype     4 bytes   b"f32\\0" or b"u8\\0\\0"
    spacing   f32 x 3   millimetres per voxel along D, H, W
    payload   channels * D * H * W values, channel-first, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DTypeError, LabelRangeError, TruncatedPayloadError, VolumeFormatError

MAGIC = b"TUV1"
VERSION = 1
_HEADER = struct.Struct("<4sII3I4s3f")
_DTYPES = {b"f32\0": np.dtype("<f4"), b"u8\0\0": np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


@dataclass
class Volume:
    data: np.ndarray  # [C, D, H, W]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def is_label(self) -> bool:
        return self.data.dtype == np.uint8


def _check_labels(data: np.ndarray) -> None:
    if data.size and data.max() > 3:
        raise LabelRangeError(f"label volume holds value {int(data.max())}; labels must be <= 3")


def encode_volume(data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> bytes:
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise DTypeError(f"volumes are [C, D, H, W] or [D, H, W], got {data.ndim} dimensions")
    if data.dtype == np.uint8:
        _check_labels(data)
        dt = np.dtype("u1")
    elif data.dtype.kind == "f":
        dt = np.dtype("<f4")
    else:
        raise DTypeError(f"unsupported dtype {data.dtype}; use float32 images or uint8 labels")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise VolumeFormatError(f"spacing must be three positive numbers, got {spacing}")
    header = _HEADER.pack(MAGIC, VERSION, data.shape[0], *data.shape[1:], _TAGS[dt], *map(float, spacing))
    return header + np.ascontiguousarray(data, dtype=dt).tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header truncated: {len(buf)} of {_HEADER.size} bytes")
    _, version, channels, d, h, w, tag, *spacing = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported version {version}")
    if tag not in _DTYPES:
        raise DTypeError(f"unknown dtype tag {tag!r}")
    dt = _DTYPES[tag]
    expected = channels * d * h * w * dt.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "has trailing bytes"
        raise TruncatedPayloadError(f"payload {kind}: {len(payload)} bytes, header implies {expected} "
                                    f"for {channels}x{d}x{h}x{w}")
    data = np.frombuffer(payload, dtype=dt).reshape(channels, d, h, w).astype(dt.newbyteorder("="))
    if dt == np.uint8:
        _check_labels(data)
    return Volume(data, tuple(float(s) for s in spacing))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a sibling temporary file so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(path: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    atomic_write_bytes(path, encode_volume(data, spacing))


def read_volume(path: str | Path) -> Volume:
    return decode_volume(Path(path).read_bytes())


def read_labels(path: str | Path) -> np.ndarray:
    vol = read_volume(path)
    if not vol.is_label:
        raise DTypeError(f"{path}: expected a u8 label volume")
    if vol.data.shape[0] != 1:
        raise DTypeError(f"{path}: label volumes have one channel, found {vol.data.shape[0]}")
    return vol.data[0]
