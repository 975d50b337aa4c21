"""Flat binary container for named arrays (checkpoints, datasets).

Layout, all integers little-endian:

    magic   4 bytes  b"DST1"
    count   u32      number of entries
    entry   repeated:
        name_len  u16
        name      UTF-8, name_len bytes
        dtype     u8   0 = float32, 1 = int64
        rank      u8
        dims      rank * u32
        payload   row-major array data, little-endian

Entries keep insertion order.  The format has no string dtype; short text
fields (configs, version tags) ride along as int64 arrays of UTF-8 byte
values via text_to_array/array_to_text.
"""

import struct

import numpy as np

from densesim.errors import ParseError, UsageError

MAGIC = b"DST1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<i8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


def save(path, entries):
    """Write an ordered {name: ndarray} mapping.

    Floats are stored as float32, integers and bools as int64; anything
    else is rejected.
    """
    chunks = [MAGIC, struct.pack("<I", len(entries))]
    seen = set()
    for name, arr in entries.items():
        if name in seen:
            raise UsageError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = np.ascontiguousarray(arr, dtype="<f4")
        elif arr.dtype.kind in "iub":
            arr = np.ascontiguousarray(arr, dtype="<i8")
        else:
            raise UsageError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise UsageError(f"entry name too long: {len(raw_name)} bytes")
        if arr.ndim > 0xFF:
            raise UsageError(f"entry {name!r} rank {arr.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for dim in arr.shape:
            if dim > 0xFFFFFFFF:
                raise UsageError(f"entry {name!r} dimension {dim} exceeds u32")
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load(path):
    """Read a container back as an ordered {name: ndarray} dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise ParseError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise ParseError(f"{path}: truncated at entry header")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + name_len + 2 > len(buf):
            raise ParseError(f"{path}: truncated entry name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise ParseError(f"{path}: entry {name!r} has unknown dtype code {code}")
        if pos + 4 * rank > len(buf):
            raise ParseError(f"{path}: truncated dims for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
        pos += 4 * rank
        dtype = _CODE_DTYPES[code]
        n_items = 1
        for d in dims:
            n_items *= d
        nbytes = n_items * dtype.itemsize
        if pos + nbytes > len(buf):
            raise ParseError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(buf, dtype=dtype, count=n_items, offset=pos).reshape(dims)
        pos += nbytes
        if name in out:
            raise ParseError(f"{path}: duplicate entry name {name!r}")
        out[name] = arr.copy()  # own the memory, drop the mmap-ish view
    if pos != len(buf):
        raise ParseError(f"{path}: {len(buf) - pos} trailing bytes after last entry")
    return out


def text_to_array(text):
    """Encode text as an int64 array of UTF-8 byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def array_to_text(arr):
    arr = np.asarray(arr)
    if arr.ndim != 1 or np.any(arr < 0) or np.any(arr > 255):
        raise ParseError("text entries must be 1-D int64 arrays of byte values")
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def describe(path):
    """[(name, dtype_str, shape)] summary without copying payloads."""
    data = load(path)
    return [(k, str(v.dtype), v.shape) for k, v in data.items()]
