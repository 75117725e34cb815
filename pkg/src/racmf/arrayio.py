"""Self-describing array container used for image pairs and checkpoints.

Layout: one UTF-8 JSON prologue line, then for each array a UTF-8 JSON
header line followed immediately by its raw payload bytes, and finally a
4-byte little-endian CRC32 of all payload bytes in file order. Arrays are
row-major, little-endian; only float32 ("f32") and uint8 ("u8") payloads
are supported.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib

import numpy as np

from .errors import FormatError

FORMAT_NAME = "racmf-arrays"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype("float32"): "f32", np.dtype("uint8"): "u8"}


def _dtype_name(arr: np.ndarray) -> str:
    try:
        return _DTYPE_NAMES[arr.dtype]
    except KeyError:
        raise FormatError(
            f"unsupported dtype {arr.dtype}; only float32 and uint8 payloads are allowed"
        ) from None


def write_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    """Write named arrays atomically (temp file + rename)."""
    path = os.fspath(path)
    chunks = [_encode(arrays, meta)]
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-arrays-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(arrays: dict[str, np.ndarray], meta: dict | None) -> bytes:
    out = []
    prologue = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "count": len(arrays),
        "meta": meta or {},
    }
    out.append(json.dumps(prologue, sort_keys=True).encode("utf-8") + b"\n")
    crc = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        header = {
            "name": name,
            "dtype": _dtype_name(arr),
            "shape": list(arr.shape),
            "order": "row-major",
            "endianness": "little",
        }
        out.append(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        payload = arr.astype(_DTYPES[header["dtype"]], copy=False).tobytes()
        crc = zlib.crc32(payload, crc)
        out.append(payload)
    out.append(crc.to_bytes(4, "little"))
    return b"".join(out)


def _read_line(buf: bytes, pos: int) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated file: missing header line terminator")
    return buf[pos:end], end + 1


def _parse_json_line(raw: bytes, what: str) -> dict:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed {what}: {exc}") from None
    if not isinstance(obj, dict):
        raise FormatError(f"malformed {what}: expected a JSON object")
    return obj


def read_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`write_arrays`.

    Raises FormatError on malformed headers, payload size mismatches, or
    checksum failure.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 5:
        raise FormatError("truncated file: shorter than minimal container")

    raw, pos = _read_line(buf, 0)
    prologue = _parse_json_line(raw, "prologue")
    if prologue.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} container: format={prologue.get('format')!r}")
    if prologue.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {prologue.get('version')!r}")
    count = prologue.get("count")
    if not isinstance(count, int) or count < 0:
        raise FormatError(f"invalid array count {count!r}")

    arrays: dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        raw, pos = _read_line(buf, pos)
        header = _parse_json_line(raw, "array header")
        missing = {"name", "dtype", "shape"} - header.keys()
        if missing:
            raise FormatError(f"array header missing keys {sorted(missing)}")
        if header["dtype"] not in _DTYPES:
            raise FormatError(f"unknown dtype {header['dtype']!r}")
        if header.get("order", "row-major") != "row-major":
            raise FormatError(f"unsupported order {header.get('order')!r}")
        if header.get("endianness", "little") != "little":
            raise FormatError(f"unsupported endianness {header.get('endianness')!r}")
        shape = header["shape"]
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise FormatError(f"invalid shape {shape!r}")
        dtype = _DTYPES[header["dtype"]]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        available = len(buf) - pos - 4  # the trailing CRC is not payload
        if nbytes > available:
            raise FormatError(
                f"array {header['name']!r} declares shape {shape} "
                f"({nbytes} bytes) but only {max(available, 0)} payload bytes remain"
            )
        payload = buf[pos:pos + nbytes]
        pos += nbytes
        crc = zlib.crc32(payload, crc)
        arrays[header["name"]] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

    if len(buf) - pos != 4:
        raise FormatError(f"expected 4 trailing CRC bytes, found {len(buf) - pos}")
    stored = int.from_bytes(buf[pos:pos + 4], "little")
    if stored != crc:
        raise FormatError(f"payload checksum mismatch: stored {stored:#010x}, computed {crc:#010x}")
    meta = prologue.get("meta", {})
    return arrays, meta
