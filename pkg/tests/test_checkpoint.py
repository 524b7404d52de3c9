import json

import numpy as np
import pytest
import torch

from geofm.checkpoint import (
    VERSION, config_of, export_branch, load_checkpoint, model_tensors, read_checkpoint, save_checkpoint,
)
from geofm.errors import ChecksumError, CorruptHeaderError, VersionMismatchError
from geofm.model import PretrainModel
from helpers import micro_config


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    model = PretrainModel(micro_config().model)
    with torch.no_grad():
        model.center.add_(0.5)
        model.bank.prototypes[7].mul_(2)
        next(model.teacher.parameters()).add_(1.0)
    path = tmp_path_factory.mktemp("ck") / "m.mmck"
    save_checkpoint(model, path, extra={"iters": 3})
    return model, path


def _rewrite_header(raw, edit):
    n = int.from_bytes(raw[6:14], "little")
    header = json.loads(raw[14:14 + n])
    edit(header)
    body = json.dumps(header).encode()
    return raw[:6] + len(body).to_bytes(8, "little") + body + raw[14 + n:]


def test_roundtrip_is_bit_identical(saved):
    model, path = saved
    loaded = load_checkpoint(path)
    a, b = model_tensors(model), model_tensors(loaded)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and torch.equal(a[k], b[k]), k
    assert config_of(path) == model.cfg
    header, _ = read_checkpoint(path)
    assert header["extra"] == {"iters": 3} and header["version"] == VERSION


def test_both_branches_and_bank_are_stored(saved):
    _, path = saved
    _, arrays = read_checkpoint(path)
    assert any(k.startswith("student/") for k in arrays)
    assert any(k.startswith("teacher/") for k in arrays)
    assert "gcpl/prototypes" in arrays and not any(k.startswith("teacher/geo") for k in arrays)


def test_export_defaults_to_teacher(saved):
    model, _ = saved
    exported = export_branch(model)
    ref = model.teacher.backbone.state_dict()
    assert all(torch.equal(exported[k], ref[k]) for k in ref)


def test_version_mismatch(saved, tmp_path):
    _, path = saved
    bad = tmp_path / "v.mmck"
    bad.write_bytes(_rewrite_header(path.read_bytes(), lambda h: h.update(version=VERSION + 1)))
    with pytest.raises(VersionMismatchError):
        read_checkpoint(bad)


def test_blob_bit_flip_is_a_checksum_error(saved, tmp_path):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0x01
    bad = tmp_path / "c.mmck"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_checkpoint(bad)


def test_garbage_header_json(saved, tmp_path):
    _, path = saved
    raw = path.read_bytes()
    bad = tmp_path / "j.mmck"
    bad.write_bytes(raw[:14] + b"!" + raw[15:])
    with pytest.raises(CorruptHeaderError):
        read_checkpoint(bad)


def test_distinct_error_codes():
    codes = {e.code for e in (CorruptHeaderError("x"), VersionMismatchError("x"), ChecksumError("x"))}
    assert len(codes) == 3


def test_saved_arrays_are_little_endian_float32(saved):
    _, path = saved
    header, arrays = read_checkpoint(path)
    for name, rec in header["tensors"].items():
        assert rec["dtype"] in ("float32", "int64")
        assert arrays[name].dtype in (np.float32, np.int64)
