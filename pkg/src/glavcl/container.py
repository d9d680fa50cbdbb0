"""GLAV binary container: named float32 arrays in a single file.

Layout (all integers little-endian unsigned 32-bit unless noted):

    bytes 0..3   magic b"GLAV"
    byte  4      format version (currently 1)
    then, repeated until end of file, one record per array:
        u32      name length in bytes
        bytes    name (UTF-8)
        u32      rank
        u32[rank] dims
        f32[prod(dims)] payload, little-endian IEEE-754

Arrays are stored as float32; boolean/integer arrays are stored as
0.0/1.0 (or small integer) float values and must be cast back by the
caller.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GLAV"
VERSION = 1

_U32 = struct.Struct("<I")


class ContainerError(Exception):
    """Base class for GLAV container parse/validation failures."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class DimensionMismatchError(ContainerError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a name -> array mapping to a GLAV container file."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(_U32.pack(len(name_bytes)))
            fh.write(name_bytes)
            fh.write(_U32.pack(arr.ndim))
            for d in arr.shape:
                fh.write(_U32.pack(d))
            fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(
            f"truncated container: expected {n} bytes for {what}, got {len(buf)}"
        )
    return buf


def read_arrays(path) -> dict[str, np.ndarray]:
    """Read a GLAV container file back into a name -> float32 array dict."""
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = fh.read(1)
        if len(version) != 1:
            raise TruncatedPayloadError("truncated container: missing version byte")
        if version[0] != VERSION:
            raise ContainerError(f"unsupported container version {version[0]}")
        while True:
            head = fh.read(_U32.size)
            if len(head) == 0:
                break
            if len(head) != _U32.size:
                raise TruncatedPayloadError("truncated container: partial name length")
            (name_len,) = _U32.unpack(head)
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            (rank,) = _U32.unpack(_read_exact(fh, _U32.size, f"rank of {name!r}"))
            if rank > 32:
                raise DimensionMismatchError(f"implausible rank {rank} for {name!r}")
            dims = []
            for i in range(rank):
                (d,) = _U32.unpack(_read_exact(fh, _U32.size, f"dim {i} of {name!r}"))
                dims.append(d)
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            if count > (1 << 31):
                raise DimensionMismatchError(f"implausible element count for {name!r}")
            payload = _read_exact(fh, 4 * count, f"payload of {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return arrays
