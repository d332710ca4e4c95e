"""Binary container for named arrays with JSON metadata.

Format (version 1, documented in docs/formats.md):

    bytes 0..7    magic ``ARRPACK1``
    bytes 8..15   header length ``n`` as little-endian uint64
    bytes 16..    UTF-8 JSON header of ``n`` bytes, then raw array payloads

The header lists each array's name, dtype, shape and byte range. Payloads
are row-major (C order), little-endian. Writing is deterministic: the same
arrays and metadata always produce the same bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"ARRPACK1"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class ContainerError(ValueError):
    """Raised when a container file is malformed."""


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus a metadata dict to ``path``.

    Arrays must be float32 or float64; they are stored as given, without
    dtype conversion. ``meta`` must be JSON-serializable.
    """
    if not arrays:
        raise ValueError("no arrays to save")
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(
                f"array {name!r} has unsupported dtype {arr.dtype.name}; "
                "expected float32 or float64"
            )
        raw = arr.astype(_DTYPES[arr.dtype.name]).tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format": "noiseopt.arrays",
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)


def load_arrays(path) -> tuple[dict, dict]:
    """Read a container written by :func:`save_arrays`.

    Returns ``(arrays, meta)`` where arrays maps name to ``np.ndarray``.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ContainerError(f"{path}: not an array container (bad magic)")
    header_len = int.from_bytes(blob[8:16], "little")
    if 16 + header_len > len(blob):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format") != "noiseopt.arrays":
        raise ContainerError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported version {header.get('version')!r}")
    base = 16 + header_len
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["byte_offset"]
        stop = start + entry["byte_length"]
        if stop > len(blob):
            raise ContainerError(f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(blob[start:stop], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"], copy=True)
    return arrays, header["meta"]
