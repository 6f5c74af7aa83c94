"""Tensor container files: JSON header followed by raw little-endian payloads.

Layout::

    b"CREDASSIGN\\n"            11-byte magic
    uint64 LE                  header length in bytes
    header                     UTF-8 JSON, keys sorted, no whitespace
    payload                    tensors back to back, offsets relative to here

The header's ``tensors`` entry lists ``{name, dtype, shape, offset, nbytes}``
for every payload tensor, in payload order. Writing the same header and
tensors always yields the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CREDASSIGN\n"
_LEN = struct.Struct("<Q")


def _le(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder == ">" else dt


def _directory(layout) -> list[dict]:
    entries, offset = [], 0
    for name, dtype, shape in layout:
        dt = _le(dtype)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        entries.append({"name": name, "dtype": dt.str, "shape": [int(s) for s in shape],
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return entries


def _encode_header(header: dict, entries: list[dict]) -> bytes:
    if "tensors" in header:
        raise ValueError("'tensors' is a reserved header key")
    body = dict(header, tensors=entries)
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    layout = [(k, v.dtype, v.shape) for k, v in tensors.items()]
    entries = _directory(layout)
    head = _encode_header(header, entries)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(head)))
        f.write(head)
        for (name, arr), e in zip(tensors.items(), entries):
            f.write(np.ascontiguousarray(arr, dtype=e["dtype"]).tobytes())


def create_container(path, header: dict, layout) -> dict[str, np.memmap]:
    """Write the header, size the file, and return writable memmaps per tensor.

    ``layout`` is a sequence of ``(name, dtype, shape)``.
    """
    entries = _directory(layout)
    head = _encode_header(header, entries)
    start = len(MAGIC) + _LEN.size + len(head)
    total = start + sum(e["nbytes"] for e in entries)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(head)))
        f.write(head)
        f.truncate(total)
    out = {}
    for e in entries:
        if e["nbytes"] == 0:
            out[e["name"]] = np.zeros(e["shape"], dtype=e["dtype"])
            continue
        out[e["name"]] = np.memmap(path, dtype=e["dtype"], mode="r+",
                                   offset=start + e["offset"], shape=tuple(e["shape"]))
    return out


def read_header(path) -> tuple[dict, int]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise FormatError(f"{path}: not a container file (bad magic)")
            raw = f.read(_LEN.size)
            if len(raw) != _LEN.size:
                raise FormatError(f"{path}: truncated header length")
            (n,) = _LEN.unpack(raw)
            head = f.read(n)
    except FileNotFoundError:
        raise FormatError(f"missing file: {path}") from None
    if len(head) != n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise FormatError(f"{path}: header lacks a tensor directory")
    return header, len(MAGIC) + _LEN.size + n


def read_container(path, mmap: bool = False) -> tuple[dict, dict[str, np.ndarray]]:
    header, start = read_header(path)
    size = Path(path).stat().st_size
    tensors = {}
    for e in header["tensors"]:
        try:
            dt, shape = np.dtype(e["dtype"]), tuple(e["shape"])
            off, nbytes = start + int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: bad tensor entry {e!r}") from exc
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != nbytes or off + nbytes > size:
            raise FormatError(f"{path}: tensor {e.get('name')!r} out of bounds or mis-sized")
        if mmap and nbytes:
            tensors[e["name"]] = np.memmap(path, dtype=dt, mode="r", offset=off, shape=shape)
        else:
            with open(path, "rb") as f:
                f.seek(off)
                buf = f.read(nbytes)
            tensors[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    header = {k: v for k, v in header.items() if k != "tensors"}
    return header, tensors
