"""LEB128-style unsigned varints, scalar and vectorized.

The vectorized forms are used for offsets and posting lists, which can hold
millions of values; the scalar forms handle headers.
"""

from __future__ import annotations

import numpy as np

_MAX_BYTES = 10  # enough for any uint64


def encode_uvarint(value: int) -> bytes:
    if value < 0:
        raise ValueError(f"varint must be non-negative, got {value}")
    out = bytearray()
    while True:
        part = value & 0x7F
        value >>= 7
        if value:
            out.append(part | 0x80)
        else:
            out.append(part)
            return bytes(out)


def decode_uvarint(data: bytes | memoryview, pos: int) -> tuple[int, int]:
    """Decode one varint at ``pos``; return ``(value, next_pos)``.

    Raises ValueError on truncation or an over-long encoding.
    """
    value = 0
    shift = 0
    for i in range(_MAX_BYTES):
        if pos >= len(data):
            raise ValueError("truncated varint")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
    raise ValueError("varint longer than 10 bytes")


def encode_uvarints(values: np.ndarray) -> bytes:
    """Encode an array of non-negative integers back to back."""
    v = np.asarray(values)
    if v.size == 0:
        return b""
    if v.dtype.kind == "i" and (v < 0).any():
        raise ValueError("varints must be non-negative")
    v = v.astype(np.uint64)
    nbytes = np.ones(v.shape, dtype=np.int64)
    for j in range(1, _MAX_BYTES):
        nbytes += v >= np.uint64(1) << np.uint64(7 * j)
    starts = np.cumsum(nbytes) - nbytes
    out = np.empty(int(nbytes.sum()), dtype=np.uint8)
    for j in range(int(nbytes.max())):
        sel = nbytes > j
        part = (v[sel] >> np.uint64(7 * j)) & np.uint64(0x7F)
        cont = np.where(nbytes[sel] > j + 1, 0x80, 0).astype(np.uint64)
        out[starts[sel] + j] = (part | cont).astype(np.uint8)
    return out.tobytes()


def decode_uvarints(data: bytes | memoryview, pos: int, count: int) -> tuple[np.ndarray, int]:
    """Decode ``count`` consecutive varints starting at ``pos``.

    Returns a uint64 array and the position just past the last varint.
    Never reads past the ``count``-th terminator byte.
    """
    if count == 0:
        return np.zeros(0, dtype=np.uint64), pos
    buf = np.frombuffer(data, dtype=np.uint8, offset=pos)
    terminators = np.flatnonzero(buf < 0x80)
    if terminators.size < count:
        raise ValueError("truncated varint sequence")
    end = int(terminators[count - 1]) + 1
    buf = buf[:end]
    term = terminators[:count]
    group_start = np.empty(count, dtype=np.int64)
    group_start[0] = 0
    group_start[1:] = term[:-1] + 1
    lengths = term - group_start + 1
    if lengths.max() > _MAX_BYTES:
        raise ValueError("varint longer than 10 bytes")
    group = np.repeat(np.arange(count), lengths)
    within = np.arange(end) - group_start[group]
    payload = (buf & 0x7F).astype(np.uint64)
    values = np.zeros(count, dtype=np.uint64)
    for j in range(int(lengths.max())):
        sel = within == j
        values[group[sel]] |= payload[sel] << np.uint64(7 * j)
    return values, pos + end
