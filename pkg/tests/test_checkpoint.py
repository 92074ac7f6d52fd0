import json
import os
import struct

import numpy as np
import pytest

from ldenet.autodiff.rng import Rng, fnv1a64
from ldenet.checkpoint import (MAGIC, VERSION, Checkpoint, from_bytes, load_checkpoint, save_checkpoint,
                               to_bytes)
from ldenet.errors import CheckpointError
from ldenet.models import LDENet, ModelConfig
from ldenet.training import Adam, TrainConfig


@pytest.fixture(scope="module")
def model():
    return LDENet(ModelConfig(), seed=1)


@pytest.fixture(scope="module")
def ckpt(model):
    named = list(model.light.named_parameters("light."))
    opt = Adam(named, TrainConfig())
    for _, p in named:
        p.grad = np.ones_like(p.data)
    opt.step(1e-3)
    model.zero_grad()
    return Checkpoint.from_model(model, train_config=TrainConfig().to_dict(), step=7,
                                 rng_state=Rng(3, "train").state, optimizer=opt.state(), meta={"stage": "x"})


def test_roundtrip_byte_identical(ckpt, tmp_path):
    path = tmp_path / "a.ldec"
    save_checkpoint(ckpt, path)
    blob = path.read_bytes()
    back = load_checkpoint(path)
    assert to_bytes(back) == blob
    assert back.step == 7 and back.meta == {"stage": "x"} and back.model_config == ModelConfig()
    assert back.rng_state == ckpt.rng_state and back.train_config == ckpt.train_config
    assert back.optimizer["step"] == 1
    for name, arr in ckpt.params.items():
        assert np.array_equal(back.params[name], arr)
    assert set(back.optimizer["m"]) == {n for n in ckpt.params if n.startswith("light.")}


def test_one_entry_per_parameter(model, ckpt):
    names = [n for n, _ in model.named_parameters()]
    assert sorted(names) == sorted(ckpt.params)
    assert ckpt.scalars() == model.param_count() == 479022


def test_light_enhancer_entries(model, ckpt):
    light = {n: v for n, v in ckpt.params.items() if n.startswith("light.")}
    assert len(light) == len(list(model.light.parameters())) == 8
    assert ckpt.scalars("light.") == 1488


def test_layout(ckpt):
    blob = to_bytes(ckpt)
    assert blob[:4] == MAGIC == b"LDEC"
    version, hlen = struct.unpack("<IQ", blob[4:16])
    assert version == VERSION == 1
    header = json.loads(blob[16:16 + hlen])
    payload = blob[16 + hlen:]
    assert header["checksum"] == f"{fnv1a64(payload):016x}"
    entry = next(e for e in header["tensors"] if e["name"] == "light.output.bias")
    raw = np.frombuffer(payload[entry["offset"]:entry["offset"] + 4 * entry["count"]], dtype="<f4")
    assert np.array_equal(raw, ckpt.params["light.output.bias"])


def test_apply_restores_model(ckpt):
    fresh = LDENet(ModelConfig(), seed=2)
    ckpt.apply_to(fresh)
    for name, p in fresh.named_parameters():
        assert np.array_equal(p.data, ckpt.params[name])


def test_config_mismatch_names_parameter(ckpt):
    other = LDENet(ModelConfig(c=8), seed=0)
    with pytest.raises(CheckpointError, match=r"shape conflict for parameter 'dis\.embed\.weight'"):
        ckpt.apply_to(other)


def test_missing_and_unknown_names(ckpt):
    deeper = LDENet(ModelConfig(n_blocks=3), seed=0)
    with pytest.raises(CheckpointError, match="lacks parameter"):
        ckpt.apply_to(deeper)
    shallow = LDENet(ModelConfig(recon_blocks=1), seed=0)
    with pytest.raises(CheckpointError, match="unknown parameter"):
        ckpt.apply_to(shallow)


def test_corrupted_payload_detected(ckpt):
    blob = bytearray(to_bytes(ckpt))
    blob[-5] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(blob))


def test_truncated_payload(ckpt):
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(to_bytes(ckpt)[:-4])


def test_truncated_header(ckpt):
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(to_bytes(ckpt)[:40])


def test_bad_magic_and_version(ckpt):
    blob = to_bytes(ckpt)
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(blob[:4] + struct.pack("<I", 2) + blob[8:])


def test_malformed_header():
    header = b'{"tensors": []}'
    with pytest.raises(CheckpointError, match="malformed"):
        from_bytes(MAGIC + struct.pack("<IQ", 1, len(header)) + header)
    bad = b"{not json"
    with pytest.raises(CheckpointError, match="malformed"):
        from_bytes(MAGIC + struct.pack("<IQ", 1, len(bad)) + bad)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.ldec")


def test_atomic_write_leaves_no_temp(ckpt, tmp_path):
    path = tmp_path / "sub" / "c.ldec"
    save_checkpoint(ckpt, path)
    save_checkpoint(ckpt, path)
    assert os.listdir(path.parent) == ["c.ldec"]
    assert (path.stat().st_mode & 0o777) == 0o666 & ~_umask()


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask
