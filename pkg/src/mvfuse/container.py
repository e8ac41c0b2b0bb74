"""Binary checkpoint container: magic "MVF1", JSON header, aligned arrays.

Layout: 4 magic bytes, an unsigned little-endian 64-bit header length, the
canonical JSON header (sorted keys, no whitespace), zero padding to a
64-byte boundary, then each array's raw little-endian bytes at 64-byte
aligned offsets. The header's ``arrays`` manifest records name, dtype,
shape, offset, and byte length, sorted by name so a save/load/save cycle
is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MVF1"
ALIGN = 64
_DTYPES = {"<f8", "<f4", "|i1"}


def _pad_to(n: int) -> int:
    return (ALIGN - n % ALIGN) % ALIGN


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    manifest = []
    offset = None  # filled after header size is known
    encoded = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.float32:
            dtype = "<f4"
        elif arr.dtype == np.int8:
            dtype = "|i1"
        else:
            raise DataError(f"array {name!r} has unsupported dtype {arr.dtype}")
        blob = arr.astype(arr.dtype.newbyteorder("<") if dtype != "|i1" else arr.dtype).tobytes()
        encoded.append((name, dtype, tuple(int(d) for d in arr.shape), blob))

    # Two-pass: manifest offsets depend on header size, which depends on the
    # manifest. Offsets are relative to the start of the array region, which
    # removes the circularity; the header records region_start separately.
    rel = 0
    for name, dtype, shape, blob in encoded:
        manifest.append({"name": name, "dtype": dtype, "shape": list(shape),
                         "offset": rel, "length": len(blob)})
        rel += len(blob) + _pad_to(len(blob))
    full_header = dict(header)
    full_header["arrays"] = manifest
    hdr_bytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    region_start = len(MAGIC) + 8 + len(hdr_bytes)
    region_start += _pad_to(region_start)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hdr_bytes)))
        fh.write(hdr_bytes)
        fh.write(b"\x00" * _pad_to(len(MAGIC) + 8 + len(hdr_bytes)))
        for name, dtype, shape, blob in encoded:
            fh.write(blob)
            fh.write(b"\x00" * _pad_to(len(blob)))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint container (bad magic)")
    (hdr_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    hdr_end = len(MAGIC) + 8 + hdr_len
    if hdr_end > len(raw):
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC) + 8 : hdr_end].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt header JSON: {exc}") from exc
    region_start = hdr_end + _pad_to(hdr_end)
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        name, dtype, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        if dtype not in _DTYPES:
            raise DataError(f"{path}: array {name!r} has unsupported dtype {dtype}")
        start = region_start + entry["offset"]
        end = start + entry["length"]
        if end > len(raw):
            raise DataError(f"{path}: truncated file (array {name!r} ends at {end}, file has {len(raw)} bytes)")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(dtype)).reshape(shape)
        arrays[name] = arr.copy()
    return header, arrays
