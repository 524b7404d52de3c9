"""Named-tensor checkpoint container.

Layout::

    b"MMCK1\\n" | u64 LE header length | UTF-8 JSON header | float32 LE blobs | sha256(all preceding bytes)

The header maps every tensor name to its shape, byte offset, byte size and
blob sha256, and embeds the model configuration so a checkpoint is
self-describing.  Validation runs cheapest-first; each failure mode has its
own error class (and ``code``).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np
import torch

from .config import ModelConfig, model_config_from_dict, to_dict
from .datakit.io import _parse_header
from .errors import ChecksumError, CorruptHeaderError, ShapeMismatchError, TruncatedBlobError, VersionMismatchError
from .model import PretrainModel

MAGIC = b"MMCK1\n"
VERSION = 1
DIGEST = 32
_DTYPES = {"float32": np.dtype("<f4"), "int64": np.dtype("<i8")}


def model_tensors(model: PretrainModel) -> dict[str, torch.Tensor]:
    """Flat name -> tensor view of everything a checkpoint holds."""
    out = {}
    for prefix, module in (("student", model.student), ("teacher", model.teacher)):
        for k, v in module.state_dict().items():
            out[f"{prefix}/{k}"] = v
    out["gcpl/prototypes"] = model.bank.prototypes
    out["gcpl/grid"] = model.bank.grid
    out["head/center"] = model.center
    out["ita/text"] = model.text
    return out


def _dtype_of(t: torch.Tensor) -> str:
    return "int64" if not t.is_floating_point() else "float32"


def save_checkpoint(model: PretrainModel, path, extra: dict | None = None) -> None:
    tensors = model_tensors(model)
    records, blobs, offset = {}, [], 0
    for name, t in tensors.items():
        kind = _dtype_of(t)
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_DTYPES[kind])
        raw = arr.tobytes()
        records[name] = {"dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
                         "sha256": hashlib.sha256(raw).hexdigest()}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "config": to_dict(model.cfg), "tensors": records,
                         "extra": extra or {}}).encode("utf-8")
    digest = hashlib.sha256()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        for chunk in (MAGIC, struct.pack("<Q", len(header)), header, *blobs):
            fh.write(chunk)
            digest.update(chunk)
        fh.write(digest.digest())
    os.replace(tmp, path)


def read_checkpoint(path, expected: dict[str, tuple] | None = None):
    """Decode and verify a checkpoint; returns ``(header, {name: np.ndarray})``.

    Checks, in order: magic and header JSON, version, blob extents
    (truncation), per-tensor shape vs byte size, shapes against ``expected``
    (or the model rebuilt from the embedded config), per-tensor digests, and
    finally the whole-file digest.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header, base = _parse_header(raw, MAGIC)
    if header.get("version") != VERSION:
        raise VersionMismatchError(f"checkpoint version {header.get('version')!r}, reader supports {VERSION}")
    try:
        records = header["tensors"]
        cfg_dict = header["config"]
        items = [(n, r["dtype"], tuple(int(s) for s in r["shape"]), int(r["offset"]), int(r["nbytes"]), r["sha256"])
                 for n, r in records.items()]
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CorruptHeaderError(f"malformed tensor table: {exc}") from exc

    payload_end = base + sum(i[4] for i in items)
    if payload_end + DIGEST > len(raw) or any(base + off + nb > len(raw) - DIGEST for _, _, _, off, nb, _ in items):
        raise TruncatedBlobError(f"file has {len(raw)} bytes, tensors need {payload_end + DIGEST}")

    if expected is None:
        expected = {n: tuple(t.shape) for n, t in model_tensors(PretrainModel(model_config_from_dict(cfg_dict))).items()}
    arrays = {}
    for name, kind, shape, off, nb, sha in items:
        if kind not in _DTYPES:
            raise CorruptHeaderError(f"{name}: unknown dtype {kind!r}")
        dtype = _DTYPES[kind]
        need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if need != nb:
            raise ShapeMismatchError(f"{name}: shape {shape} needs {need} bytes, header says {nb}", name=name)
        if name in expected and tuple(expected[name]) != shape:
            raise ShapeMismatchError(f"{name}: stored shape {shape}, model expects {tuple(expected[name])}", name=name)
        blob = raw[base + off: base + off + nb]
        if hashlib.sha256(blob).hexdigest() != sha:
            raise ChecksumError(f"{name}: blob digest mismatch")
        arrays[name] = np.frombuffer(blob, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    missing = set(expected) - set(arrays)
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks tensors {sorted(missing)[:5]}", name=sorted(missing)[0])
    if hashlib.sha256(raw[:-DIGEST]).digest() != raw[-DIGEST:]:
        raise ChecksumError("file digest mismatch")
    return header, arrays


def load_checkpoint(path) -> PretrainModel:
    header, arrays = read_checkpoint(path)
    model = PretrainModel(model_config_from_dict(header["config"]))
    apply_tensors(model, arrays)
    return model


@torch.no_grad()
def apply_tensors(model: PretrainModel, arrays: dict) -> None:
    for name, t in model_tensors(model).items():
        t.copy_(torch.from_numpy(np.array(arrays[name])))


def export_branch(model: PretrainModel, branch: str = "teacher") -> dict[str, torch.Tensor]:
    """Backbone weights of one branch, for downstream use."""
    net = getattr(model, branch)
    return {k: v.detach().clone() for k, v in net.backbone.state_dict().items()}


def config_of(path) -> ModelConfig:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if head[: len(MAGIC)] != MAGIC or len(head) < len(MAGIC) + 8:
            raise CorruptHeaderError(f"bad magic: expected {MAGIC!r}")
        (length,) = struct.unpack_from("<Q", head, len(MAGIC))
        raw = head + fh.read(length)
    header, _ = _parse_header(raw, MAGIC)
    return model_config_from_dict(header["config"])
