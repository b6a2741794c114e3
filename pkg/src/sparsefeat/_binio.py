"""Versioned little-endian container for checkpoints and model files.

Layout::

    magic (4 bytes) | version u32 | meta_len u32 | meta (UTF-8 JSON, sorted keys)
    n_arrays u32
    per array: name_len u16 | name | dtype code u8 | ndim u8 | dims u32*ndim | data

The JSON block holds everything that is not an array (configs, RNG states),
so files are byte-identical for identical content.
"""

import json
import struct

import numpy as np

from .exceptions import FormatError

VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("|b1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _code(a):
    dt = a.dtype
    if dt == np.bool_:
        return 4, _DTYPES[4]
    dt = dt.newbyteorder("<")
    if dt.kind == "i":
        dt = np.dtype("<i8")
    if dt not in _CODES:
        raise FormatError(f"cannot serialise dtype {a.dtype}")
    return _CODES[dt], dt


def write_container(path, magic, meta, arrays):
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            a = np.asarray(arrays[name])
            code, dt = _code(a)
            nb = name.encode()
            f.write(struct.pack("<HBB", len(nb), code, a.ndim) + nb)
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def read_container(path, magic):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        pos = 12
        meta = json.loads(buf[pos : pos + meta_len].decode())
        pos += meta_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            name_len, code, ndim = struct.unpack_from("<HBB", buf, pos)
            pos += 4
            name = buf[pos : pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(buf):
                raise FormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt file ({exc})") from exc
    return meta, arrays
