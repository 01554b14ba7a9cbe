"""Binary container: JSON header followed by a float64 payload.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"CRESTv1\\n"
    8       8     uint64 N, byte length of the header
    16      N     UTF-8 JSON object, see below
    16+N    ...   payload: float64 little-endian values, arrays back to back

The header object has two keys: ``"meta"`` (free-form JSON) and
``"arrays"``, a list of ``{"name", "shape", "offset"}`` records where
``offset`` counts float64 elements from the start of the payload. Arrays are
stored C-order. The writer emits keys sorted and no whitespace so identical
content always serializes to identical bytes.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"CRESTv1\n"
_HEADER_LEN = struct.Struct("<Q")


class ContainerError(ValueError):
    """Malformed container; the message names the byte offset of the fault."""


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    records = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.size
    header = json.dumps({"arrays": records, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + _HEADER_LEN.pack(len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict, dict]:
    """Parse a container; returns ``(arrays, meta)``."""
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic at byte offset 0")
    pos = len(MAGIC)
    if len(blob) < pos + _HEADER_LEN.size:
        raise ContainerError(f"truncated header length at byte offset {pos}")
    (n,) = _HEADER_LEN.unpack_from(blob, pos)
    pos += _HEADER_LEN.size
    if len(blob) < pos + n:
        raise ContainerError(f"header of {n} bytes truncated at byte offset {len(blob)}")
    try:
        header = json.loads(blob[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        where = pos + getattr(exc, "pos", getattr(exc, "start", 0))
        raise ContainerError(f"invalid JSON header at byte offset {where}: {exc}") from None
    if not isinstance(header, dict) or "arrays" not in header:
        raise ContainerError(f"header at byte offset {pos} lacks an 'arrays' list")
    payload_start = pos + n
    payload = blob[payload_start:]
    if len(payload) % 8:
        raise ContainerError(f"payload length {len(payload)} at byte offset {payload_start} is not a multiple of 8")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for rec in header["arrays"]:
        try:
            name, shape, off = rec["name"], tuple(int(s) for s in rec["shape"]), int(rec["offset"])
        except (KeyError, TypeError, ValueError):
            raise ContainerError(f"bad array record {rec!r} in header at byte offset {pos}") from None
        size = int(np.prod(shape)) if shape else 1
        if off < 0 or off + size > flat.size:
            raise ContainerError(
                f"array '{name}' extends past end of payload "
                f"(byte offset {payload_start + 8 * (off + size)} > {len(blob)})"
            )
        arrays[name] = flat[off:off + size].astype(np.float64).reshape(shape)
    return arrays, header.get("meta", {})


def save(path: str | os.PathLike, arrays: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, meta))


def load(path: str | os.PathLike) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
