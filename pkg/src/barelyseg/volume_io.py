"""Self-describing binary container for volumes, label grids and checkpoints.

Layout::

    BVOL 1\\n
    (record)*

    record := header lines "key=value\\n" ... "end\\n", then nbytes of payload

Header keys: ``name``, ``kind`` (``real`` | ``class``), ``dtype``, ``shape``
(comma separated), ``axes``, ``endian`` (always ``little``), ``classes``
(class grids only) and ``nbytes``. Payloads are row-major little-endian.
"""

from __future__ import annotations

import os
from typing import BinaryIO

import numpy as np

from .voxel import LabelVolume, Volume

MAGIC = b"BVOL 1\n"
REAL_DTYPES = ("float32", "float64")
CLASS_DTYPES = ("uint8", "int16", "int32", "int64")
_REQUIRED = ("name", "kind", "dtype", "shape", "axes", "endian", "nbytes")


class VolumeFileError(Exception):
    pass


class HeaderError(VolumeFileError):
    pass


class TruncatedPayloadError(VolumeFileError):
    pass


class DtypeError(VolumeFileError):
    pass


def _encode(name: str, arr: np.ndarray, kind: str, axes: str, classes: int | None) -> bytes:
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.name
    allowed = REAL_DTYPES if kind == "real" else CLASS_DTYPES
    if dtype not in allowed:
        raise DtypeError(f"dtype {dtype} not allowed for kind {kind!r}")
    if "\n" in name or "=" in name:
        raise HeaderError(f"record name {name!r} contains a reserved character")
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    lines = [
        f"name={name}",
        f"kind={kind}",
        f"dtype={dtype}",
        f"shape={','.join(str(n) for n in arr.shape)}",
        f"axes={axes}",
        "endian=little",
    ]
    if classes is not None:
        lines.append(f"classes={classes}")
    lines += [f"nbytes={len(payload)}", "end"]
    return ("\n".join(lines) + "\n").encode("ascii") + payload


def _kind_for(arr: np.ndarray) -> str:
    return "real" if np.issubdtype(arr.dtype, np.floating) else "class"


def save_records(path, records: dict, axes: dict | None = None) -> None:
    """Write ``name -> array`` records (in insertion order) to one file."""
    chunks = [MAGIC]
    for name, arr in records.items():
        arr = np.asarray(arr)
        kind = _kind_for(arr)
        chunks.append(_encode(name, arr, kind, (axes or {}).get(name, "-"), None))
    _write(path, b"".join(chunks))


def _write(path, data: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_volume(path, obj, name: str = "volume") -> None:
    """Save a :class:`Volume`, :class:`LabelVolume` or a 2D class grid."""
    if isinstance(obj, Volume):
        data = _encode(name, obj.data, "real", "C,D,H,W", None)
    elif isinstance(obj, LabelVolume):
        data = _encode(name, obj.data, "class", "D,H,W", obj.num_classes)
    else:
        arr = np.asarray(obj)
        kind = _kind_for(arr)
        axes = ",".join("CDHW"[-arr.ndim :]) if arr.ndim <= 4 else "-"
        classes = int(arr.max()) + 1 if kind == "class" and arr.size else None
        data = _encode(name, arr, kind, axes, max(2, classes) if classes else None)
    _write(path, MAGIC + data)


def _read_header(fh: BinaryIO) -> dict | None:
    header = {}
    first = True
    while True:
        line = fh.readline(4096)
        if not line:
            if first:
                return None
            raise HeaderError("header ended before 'end' line")
        first = False
        if not line.endswith(b"\n"):
            raise HeaderError("unterminated header line")
        text = line[:-1].decode("ascii", errors="replace")
        if text == "end":
            break
        key, sep, value = text.partition("=")
        if not sep or not key:
            raise HeaderError(f"malformed header line {text!r}")
        if key in header:
            raise HeaderError(f"duplicate header key {key!r}")
        header[key] = value
    missing = [k for k in _REQUIRED if k not in header]
    if missing:
        raise HeaderError(f"header missing keys {missing}")
    if header["endian"] != "little":
        raise HeaderError(f"unsupported endianness {header['endian']!r}")
    if header["kind"] not in ("real", "class"):
        raise HeaderError(f"unknown kind {header['kind']!r}")
    dtype = header["dtype"]
    allowed = REAL_DTYPES if header["kind"] == "real" else CLASS_DTYPES
    if dtype not in REAL_DTYPES + CLASS_DTYPES:
        raise DtypeError(f"unknown dtype {dtype!r}")
    if dtype not in allowed:
        raise DtypeError(f"dtype {dtype!r} inconsistent with kind {header['kind']!r}")
    try:
        shape = tuple(int(n) for n in header["shape"].split(",")) if header["shape"] else ()
        nbytes = int(header["nbytes"])
        classes = int(header["classes"]) if "classes" in header else None
    except ValueError as exc:
        raise HeaderError(f"non-integer header field: {exc}") from None
    if any(n < 0 for n in shape) or nbytes != int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize:
        raise HeaderError(f"nbytes {nbytes} inconsistent with shape {shape} and dtype {dtype}")
    header.update(shape=shape, nbytes=nbytes, classes=classes)
    return header


def _read_records(path) -> list[tuple[dict, np.ndarray]]:
    out = []
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise HeaderError(f"{path}: not a volume file (bad magic)")
        while True:
            header = _read_header(fh)
            if header is None:
                break
            payload = fh.read(header["nbytes"])
            if len(payload) != header["nbytes"]:
                raise TruncatedPayloadError(
                    f"{path}: record {header['name']!r} expects {header['nbytes']} bytes, got {len(payload)}"
                )
            dt = np.dtype(header["dtype"]).newbyteorder("<")
            arr = np.frombuffer(payload, dtype=dt).reshape(header["shape"]).astype(header["dtype"])
            out.append((header, arr))
    if not out:
        raise HeaderError(f"{path}: no records")
    return out


def load_records(path) -> dict[str, np.ndarray]:
    return {h["name"]: arr for h, arr in _read_records(path)}


def load_volume(path, expect: str | None = None):
    """Load the first record as a :class:`Volume` (real) or :class:`LabelVolume` (class).

    ``expect`` (``"real"`` or ``"class"``) turns a kind mismatch into
    :class:`DtypeError`.
    """
    header, arr = _read_records(path)[0]
    kind = header["kind"]
    if expect is not None and kind != expect:
        raise DtypeError(f"{path}: expected a {expect} grid, file holds a {kind} grid")
    if kind == "real":
        return Volume(arr) if arr.ndim in (3, 4) else arr
    if arr.ndim == 3:
        return LabelVolume(arr, header["classes"] or max(2, int(arr.max()) + 1))
    return arr
