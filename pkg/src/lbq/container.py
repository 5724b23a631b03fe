"""LBQ1 binary checkpoint container.

Layout (all integers little-endian)::

    b"LBQ1" | u32 version | u64 header_len | header (UTF-8 JSON) | zero pad to 8 | payloads

The JSON header is ``{"version", "entries", "metadata"}``. Each entry records
``dtype`` (``f32``, ``i8`` or ``i4p``), ``shape``, ``granularity``,
``group_size``, and the absolute file ``offset`` and ``length`` of its payload.
Payloads start on 8-byte boundaries. ``i4p`` packs two signed nibbles per byte,
element ``2k`` in the low nibble.

Every ``i8``/``i4p`` entry must have an ``f32`` companion named ``<name>.scale``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import FormatError

__all__ = ["ContainerEntry", "Container", "write_container", "read_container", "MAGIC", "VERSION"]

MAGIC = b"LBQ1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_ALIGN = 8

_NUMPY_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1"), "i4p": np.dtype("u1")}


def payload_nbytes(dtype: str, shape) -> int:
    n = math.prod(shape)
    if dtype == "f32":
        return 4 * n
    if dtype == "i8":
        return n
    if dtype == "i4p":
        return (n + 1) // 2
    raise FormatError(f"unknown dtype {dtype!r}")


def _align(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


@dataclass
class ContainerEntry:
    """One named payload. ``data`` holds the values exactly as stored:
    shaped float32 for ``f32``, shaped int8 for ``i8``, flat packed uint8 for ``i4p``."""

    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray
    granularity: str = "none"
    group_size: int = 0

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if self.dtype not in _NUMPY_DTYPES:
            raise FormatError(f"unknown dtype {self.dtype!r}")
        self.data = np.ascontiguousarray(self.data, dtype=_NUMPY_DTYPES[self.dtype])
        if self.data.nbytes != payload_nbytes(self.dtype, self.shape):
            raise FormatError(
                f"{self.dtype} payload of {self.data.nbytes} bytes does not match shape {self.shape}"
            )

    def tobytes(self) -> bytes:
        return self.data.tobytes(order="C")


@dataclass
class Container:
    entries: dict[str, ContainerEntry]
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = VERSION


def _check_companions(entries: Mapping[str, Any], dtype_of) -> None:
    for name, entry in entries.items():
        if dtype_of(entry) in ("i8", "i4p"):
            scale = entries.get(f"{name}.scale")
            if scale is None or dtype_of(scale) != "f32":
                raise FormatError(f"quantized entry {name!r} lacks an f32 '{name}.scale' companion")


def _build_header(entries: Mapping[str, ContainerEntry], metadata, base: int) -> tuple[dict, list]:
    header_entries = {}
    layout = []
    offset = base
    for name in sorted(entries):
        entry = entries[name]
        length = entry.data.nbytes
        header_entries[name] = {
            "dtype": entry.dtype,
            "shape": list(entry.shape),
            "granularity": entry.granularity,
            "group_size": int(entry.group_size),
            "offset": offset,
            "length": length,
        }
        layout.append((offset, entry))
        offset = _align(offset + length)
    return {"version": VERSION, "entries": header_entries, "metadata": metadata}, layout


def _dump(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, entries: Mapping[str, ContainerEntry], metadata: Mapping | None = None) -> None:
    """Serialize ``entries`` (plus free-form JSON ``metadata``) to ``path``."""
    entries = dict(entries)
    metadata = dict(metadata or {})
    _check_companions(entries, lambda e: e.dtype)
    # Absolute offsets depend on the header length, which depends on the offsets' digits.
    base = _align(_PREFIX.size)
    for _ in range(16):
        header, layout = _build_header(entries, metadata, base)
        blob = _dump(header)
        new_base = _align(_PREFIX.size + len(blob))
        if new_base == base:
            break
        base = new_base
    else:  # pragma: no cover - offsets grow monotonically, so this converges in a few passes
        raise FormatError("header layout did not converge")

    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        pos = _PREFIX.size + len(blob)
        for offset, entry in layout:
            fh.write(b"\x00" * (offset - pos))
            payload = entry.tobytes()
            fh.write(payload)
            pos = offset + len(payload)


def read_container(path) -> Container:
    """Parse and validate a container written by :func:`write_container`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    size = len(raw)
    if size < _PREFIX.size:
        raise FormatError("file too short for LBQ1 prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if _PREFIX.size + header_len > size:
        raise FormatError("truncated header")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("entries"), dict):
        raise FormatError("header lacks an entries map")

    data_start = _PREFIX.size + header_len
    spans = []
    entries: dict[str, ContainerEntry] = {}
    for name, meta in header["entries"].items():
        try:
            dtype = meta["dtype"]
            shape = tuple(int(d) for d in meta["shape"])
            offset = int(meta["offset"])
            length = int(meta["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed header entry {name!r}") from exc
        if dtype not in _NUMPY_DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype {dtype!r}")
        if length != payload_nbytes(dtype, shape):
            raise FormatError(f"entry {name!r}: length {length} does not match {dtype} {shape}")
        if offset % _ALIGN or offset < data_start:
            raise FormatError(f"entry {name!r}: misplaced offset {offset}")
        if offset + length > size:
            raise FormatError(f"entry {name!r}: truncated payload")
        spans.append((offset, offset + length, name))
        buf = np.frombuffer(raw, dtype=_NUMPY_DTYPES[dtype], count=length // _NUMPY_DTYPES[dtype].itemsize, offset=offset)
        data = buf.copy() if dtype == "i4p" else buf.reshape(shape).copy()
        entries[name] = ContainerEntry(
            dtype=dtype,
            shape=shape,
            data=data,
            granularity=meta.get("granularity", "none"),
            group_size=int(meta.get("group_size", 0)),
        )
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"entries {a!r} and {b!r} overlap")
    _check_companions(entries, lambda e: e.dtype)
    return Container(entries=entries, metadata=header.get("metadata", {}), version=version)


def file_digest(path) -> str:
    """sha256 of a file, for determinism checks."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def is_container(path) -> bool:
    if not os.path.isfile(path):
        return False
    with open(path, "rb") as fh:
        return fh.read(4) == MAGIC
