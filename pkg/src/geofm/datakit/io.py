"""Binary dataset container.

Layout::

    b"MMDS1\\n" | u64 LE header length | UTF-8 JSON header | raw LE blobs

The header lists, per sample, each array's element type, shape, byte offset
(relative to the first blob byte) and byte size, plus the scalar geo fields.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..errors import CorruptHeaderError, ShapeMismatchError, TruncatedBlobError
from .synthetic import GeoSample

MAGIC = b"MMDS1\n"
_ARRAYS = ("hr_image", "ms_series", "sar_series", "labels", "acquisition_days")
_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "float32"
    if arr.dtype.kind in "iu":
        return "int32"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def write_dataset(samples, path) -> None:
    entries, blobs, offset = [], [], 0
    for sample in samples:
        arrays = {}
        for name in _ARRAYS:
            kind = _dtype_name(getattr(sample, name))
            arr = np.ascontiguousarray(getattr(sample, name), dtype=_DTYPES[kind])
            arrays[name] = {"dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        entries.append({"lon": sample.lon, "lat": sample.lat, "arrays": arrays})
    header = json.dumps({"version": 1, "samples": entries}).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def _parse_header(raw: bytes, magic: bytes):
    if len(raw) < len(magic) + 8 or raw[: len(magic)] != magic:
        raise CorruptHeaderError(f"bad magic: expected {magic!r}")
    (length,) = struct.unpack_from("<Q", raw, len(magic))
    start = len(magic) + 8
    if start + length > len(raw):
        raise CorruptHeaderError("header length exceeds file size")
    try:
        header = json.loads(raw[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptHeaderError("header must be a JSON object")
    return header, start + length


def read_dataset(path) -> list[GeoSample]:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, base = _parse_header(raw, MAGIC)
    try:
        entries = header["samples"]
    except KeyError as exc:
        raise CorruptHeaderError("header has no 'samples' list") from exc

    samples = []
    for i, entry in enumerate(entries):
        arrays = {}
        try:
            items = entry["arrays"].items()
        except (KeyError, AttributeError, TypeError) as exc:
            raise CorruptHeaderError(f"sample {i}: malformed entry") from exc
        for name, info in items:
            try:
                dtype = _DTYPES[info["dtype"]]
                shape = tuple(int(s) for s in info["shape"])
                offset, nbytes = int(info["offset"]), int(info["nbytes"])
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptHeaderError(f"sample {i}/{name}: malformed array record") from exc
            expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if expected != nbytes:
                raise ShapeMismatchError(
                    f"sample {i}/{name}: shape {shape} needs {expected} bytes, header says {nbytes}",
                    name=f"{i}/{name}")
            end = base + offset + nbytes
            if end > len(raw):
                raise TruncatedBlobError(f"sample {i}/{name}: blob ends at byte {end}, file has {len(raw)}")
            arrays[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=base + offset).reshape(shape).astype(dtype.newbyteorder("="))
        missing = set(_ARRAYS) - set(arrays)
        if missing:
            raise CorruptHeaderError(f"sample {i}: missing arrays {sorted(missing)}")
        samples.append(GeoSample(lon=float(entry["lon"]), lat=float(entry["lat"]), **arrays))
    return samples
