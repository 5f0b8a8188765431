"""Sparse payload codec and communication-cost accounting.

Payload layout, all little-endian::

    offset  size  field
    0       4     magic "EFCM"
    4       2     version (u16, currently 1)
    6       1     scale index (u8)
    7       2     channels L (u16)
    9       2     height H (u16)
    11      2     width W (u16)
    13      4     cell count (u32)
    17      ...   count records: row u16, col u16, L x binary32

Records are sorted by row-major cell index.  A cell is shipped when any of its
channels is nonzero, so a payload is ``17 + count * (4 + 4L)`` bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .grid import CellMask, FeatureTensor

MAGIC = b"EFCM"
VERSION = 1
HEADER = struct.Struct("<4sHBHHHI")
HEADER_SIZE = HEADER.size  # 17
BYTES_PER_ELEMENT = 4
MEGABYTE = 1_000_000


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class PayloadMeta:
    version: int
    scale: int
    channels: int
    height: int
    width: int
    count: int


def record_size(channels: int) -> int:
    return 4 + BYTES_PER_ELEMENT * channels


def payload_size(count: int, channels: int) -> int:
    return HEADER_SIZE + count * record_size(channels)


def _record_dtype(channels: int) -> np.dtype:
    return np.dtype([("row", "<u2"), ("col", "<u2"), ("values", "<f4", (channels,))])


def encode_sparse(features: FeatureTensor, mask: CellMask | None = None, scale: int = 0) -> bytes:
    """Serialise the nonzero cells of ``features``.

    When ``mask`` is given, every nonzero cell must lie inside it.
    """
    channels, height, width = features.values.shape
    if max(channels, height, width) > 0xFFFF:
        raise EncodeError(f"grid {features.values.shape} exceeds the u16 index range")
    if not 0 <= scale <= 0xFF:
        raise EncodeError(f"scale {scale} does not fit in a u8")
    support = features.support()
    if mask is not None:
        if mask.bits.shape != support.shape:
            raise EncodeError(f"mask {mask.bits.shape} does not match grid {support.shape}")
        if np.any(support & ~mask.bits):
            raise EncodeError("features are nonzero outside the mask")
    rows, cols = np.nonzero(support)  # row-major order
    count = len(rows)
    records = np.empty(count, dtype=_record_dtype(channels))
    records["row"] = rows
    records["col"] = cols
    records["values"] = features.values[:, rows, cols].T
    return HEADER.pack(MAGIC, VERSION, scale, channels, height, width, count) + records.tobytes()


def decode_sparse(data: bytes) -> tuple[FeatureTensor, PayloadMeta]:
    data = bytes(data)
    if data[:4] != MAGIC:
        if MAGIC.startswith(data):
            raise DecodeError("truncated header", len(data))
        raise DecodeError("bad magic", 0)
    if len(data) < HEADER_SIZE:
        raise DecodeError("truncated header", len(data))
    _, version, scale, channels, height, width, count = HEADER.unpack_from(data)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    if channels == 0 or height == 0 or width == 0:
        raise DecodeError(f"empty grid {channels}x{height}x{width}", 7)
    if count > height * width:
        raise DecodeError(f"cell count {count} exceeds {height * width} cells", 13)
    rsize = record_size(channels)
    expected = HEADER_SIZE + count * rsize
    if len(data) < expected:
        raise DecodeError(f"truncated body: need {expected} bytes, have {len(data)}", len(data))
    if len(data) > expected:
        raise DecodeError(f"{len(data) - expected} trailing bytes", expected)

    records = np.frombuffer(data, dtype=_record_dtype(channels), count=count, offset=HEADER_SIZE)
    rows = records["row"].astype(np.int64)
    cols = records["col"].astype(np.int64)
    bad = np.nonzero((rows >= height) | (cols >= width))[0]
    if len(bad):
        raise DecodeError(f"cell ({rows[bad[0]]}, {cols[bad[0]]}) outside {height}x{width}", HEADER_SIZE + int(bad[0]) * rsize)
    flat = rows * width + cols
    bad = np.nonzero(np.diff(flat) <= 0)[0]
    if len(bad):
        raise DecodeError("cell indices not strictly increasing", HEADER_SIZE + (int(bad[0]) + 1) * rsize)

    values = np.zeros((channels, height, width))
    values[:, rows, cols] = records["values"].T.astype(np.float64)
    return FeatureTensor(values), PayloadMeta(version, scale, channels, height, width, count)


def comm_log2(tensors: Iterable[FeatureTensor], times_bytes: bool = False) -> float:
    """log2 of the nonzero element count across transmitted tensors (0 when nothing is sent).

    With ``times_bytes`` the count is first multiplied by the wire bytes per element.
    """
    count = sum(t.nonzero_count() for t in tensors)
    if count == 0:
        return 0.0
    if times_bytes:
        count *= BYTES_PER_ELEMENT
    return math.log2(count)


@dataclass(frozen=True)
class BandwidthStats:
    """Per-frame bandwidth in MB (10**6 bytes); ``std`` is the population deviation."""

    mean: float
    std: float
    max: float
    min: float


def bandwidth_stats(byte_totals: Sequence[float]) -> BandwidthStats:
    if len(byte_totals) == 0:
        raise ValueError("bandwidth_stats needs at least one frame")
    mb = [b / MEGABYTE for b in byte_totals]
    n = len(mb)
    mean = math.fsum(mb) / n
    lo, hi = min(mb), max(mb)
    mean = min(max(mean, lo), hi)
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in mb) / n)
    return BandwidthStats(mean, std, hi, lo)
