"""Versioned flat-file container: a text header followed by raw little-endian arrays.

Layout::

    cascadehash-container/1\\n
    {"arrays": [...], "kind": "...", "meta": {...}}\\n
    <array 0 bytes><array 1 bytes>...

The JSON header is written with sorted keys and fixed separators so that
read -> write reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

SCHEMA = b"cascadehash-container/1"
_DTYPES = {"<f8": np.float64, "<u8": np.uint64, "<i8": np.int64}


class FormatError(ValueError):
    """A file does not follow the expected layout; the message names the offending field."""


def dumps_header(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode_container(kind: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        key = dt.str
        if key not in _DTYPES:
            raise FormatError(f"array {name!r}: unsupported dtype {arr.dtype}")
        entries.append({"dtype": key, "name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = dumps_header({"arrays": entries, "kind": kind, "meta": dict(meta)})
    return b"\n".join([SCHEMA, header, b""]) + b"".join(blobs)


def decode_container(blob: bytes, expect_kind: str | None = None):
    """Return ``(kind, meta, arrays)``; arrays keep their stored order."""
    first = blob.find(b"\n")
    if first < 0 or blob[:first] != SCHEMA:
        raise FormatError(f"schema: expected {SCHEMA.decode()!r}")
    second = blob.find(b"\n", first + 1)
    if second < 0:
        raise FormatError("header: missing terminator")
    try:
        header = json.loads(blob[first + 1 : second])
    except json.JSONDecodeError as exc:
        raise FormatError(f"header: invalid JSON ({exc})") from None
    for key in ("arrays", "kind", "meta"):
        if key not in header:
            raise FormatError(f"header: missing field {key!r}")
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"kind: expected {expect_kind!r}, got {kind!r}")
    arrays = {}
    offset = second + 1
    for entry in header["arrays"]:
        name, dtype, shape = entry.get("name"), entry.get("dtype"), entry.get("shape")
        if dtype not in _DTYPES:
            raise FormatError(f"array {name!r}: unsupported dtype {dtype!r}")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"array {name!r}: truncated payload")
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"payload: {len(blob) - offset} trailing bytes")
    return kind, header["meta"], arrays


def write_container(path, kind: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(kind, meta, arrays))


def read_container(path, expect_kind: str | None = None):
    return decode_container(Path(path).read_bytes(), expect_kind)


def write_jsonl(path, records, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":"), allow_nan=False) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc})") from None
    return out
