"""Binary tensor container (".snmt") used for masks, volumes and checkpoints.

Layout, all integers little-endian::

    b"SNMT" | version u8 | entry_count u16 |
    per entry: name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 * ndim | payload

Payloads are row-major (C order).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError, ParameterError, VolumeNotFoundError

MAGIC = b"SNMT"
FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<c8"),
    4: np.dtype("<c16"),
    5: np.dtype("u1"),
    6: np.dtype("<i4"),
}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.bool_:
        return 5
    for code, dt in DTYPE_CODES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder(">"):
            return code
    raise ParameterError(f"dtype {arr.dtype} is not storable in a tensor container")


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    if len(entries) > 0xFFFF:
        raise ParameterError("too many entries for a tensor container")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BH", FORMAT_VERSION, len(entries)))
    for name, value in entries.items():
        arr = np.asarray(value)
        code = _dtype_code(arr)
        arr = np.asarray(arr, dtype=DTYPE_CODES[code], order="C")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ParameterError(f"entry {name!r} exceeds container limits")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerFormatError("truncated tensor container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerFormatError("bad magic; not a tensor container")
    version, count = struct.unpack("<BH", take(3))
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError("entry name is not valid UTF-8") from exc
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPE_CODES:
            raise ContainerFormatError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(dims)
        if name in entries:
            raise ContainerFormatError(f"duplicate entry {name!r}")
        entries[name] = arr.copy()
    if pos != len(view):
        raise ContainerFormatError(f"{len(view) - pos} trailing bytes after last entry")
    return entries


def write_container(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def read_container(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise VolumeNotFoundError(f"no container file at {path}")
    return loads(path.read_bytes())


def encode_manifest(obj) -> np.ndarray:
    text = json.dumps(obj, sort_keys=True)
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def decode_manifest(arr: np.ndarray):
    return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))
