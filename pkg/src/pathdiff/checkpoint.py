"""Binary tensor container.

Layout (all integers little-endian)::

    magic    8 bytes   b"PDIFFCKP"
    version  1 byte    FORMAT_VERSION
    records, repeated until end of file:
        name_len  uint32
        name      name_len bytes, UTF-8
        rank      uint32
        dims      rank x uint64
        payload   prod(dims) x float64

Round trips are bit-exact.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"PDIFFCKP"
FORMAT_VERSION = 1


def encode_tensors(tensors):
    parts = [MAGIC, bytes([FORMAT_VERSION])]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def decode_tensors(buf):
    if len(buf) < len(MAGIC) + 1 or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version = buf[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos = len(MAGIC) + 1
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"corrupt record name at byte {pos}") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 16:
            raise FormatError(f"implausible rank {rank} for record {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if name in out:
            raise FormatError(f"duplicate record {name!r}")
        out[name] = payload.reshape(dims)
    return out


def write_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def read_tensors(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
