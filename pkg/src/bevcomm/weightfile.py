"""Flat binary parameter files shared by the policy and fusion weights.

Layout (little-endian)::

    magic      4 bytes ("AGRW" or "MOEW")
    version    u16
    records    repeated until end of file:
        name_len   u16
        name       UTF-8, name_len bytes
        rank       u8
        dims       rank x u32
        values     prod(dims) x binary32
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


def quantize(arr) -> np.ndarray:
    """Round to binary32 and back, so values survive a save/load cycle exactly."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def dump_params(magic: bytes, params: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    out = bytearray(magic)
    out += struct.pack("<H", FORMAT_VERSION)
    for name, arr in params.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def parse_params(data: bytes, magic: bytes) -> dict[str, np.ndarray]:
    if data[:4] != magic:
        raise WeightFileError(f"bad magic at offset 0: expected {magic!r}, got {bytes(data[:4])!r}")
    if len(data) < 6:
        raise WeightFileError(f"truncated header at offset {len(data)}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported version {version} at offset 4")
    params: dict[str, np.ndarray] = {}
    pos = 6
    try:
        while pos < len(data):
            start = pos
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + name_len > len(data):
                raise WeightFileError(f"truncated record name at offset {pos}")
            name = bytes(data[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 4 * count
            if end > len(data):
                raise WeightFileError(f"truncated values for {name!r} at offset {pos}")
            if name in params:
                raise WeightFileError(f"duplicate parameter {name!r} at offset {start}")
            values = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            params[name] = values.astype(np.float64).reshape(dims)
            pos = end
    except struct.error as exc:
        raise WeightFileError(f"truncated record at offset {pos}") from exc
    return params


def check_shapes(params: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise WeightFileError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise WeightFileError(f"{name}: shape {tuple(params[name].shape)} does not match architecture {tuple(shape)}")
        if not np.all(np.isfinite(params[name])):
            raise WeightFileError(f"{name}: non-finite values")
