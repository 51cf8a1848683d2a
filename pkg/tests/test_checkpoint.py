import struct
import zlib

import pytest
import torch

from sam2unext import checkpoint as ck
from sam2unext import nn_core
from sam2unext.checkpoint import MAGIC, decode_tensors, encode_tensors, read_tensors, write_tensors
from sam2unext.errors import CheckpointError
from sam2unext.model import build_model
from sam2unext.trainer import AdamW, load_checkpoint, restore_model, save_checkpoint


def sample_tensors(gen):
    return {
        "a.w": torch.randn(3, 4, generator=gen),
        "b": torch.randn(5, generator=gen, dtype=torch.float64),
        "count": torch.tensor(7, dtype=torch.int64),
    }


def reseal(body: bytes) -> bytes:
    """Recompute the trailing checksum over an edited file body."""
    return body + struct.pack("<I", zlib.crc32(body))


def test_tensor_round_trip(tmp_path, gen):
    tensors = sample_tensors(gen)
    write_tensors(tmp_path / "t.bin", tensors, {"note": "x"})
    back, meta = read_tensors(tmp_path / "t.bin")
    assert meta == {"note": "x"}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])


def test_unsupported_dtype_rejected():
    with pytest.raises(CheckpointError, match="dtype"):
        encode_tensors({"x": torch.zeros(2, dtype=torch.int8)})


def test_model_checkpoint_round_trip(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.01)
    save_checkpoint(tmp_path / "m.ckpt", model, None, step=12)
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    assert ckpt.step == 12 and ckpt.version == ck.FORMAT_VERSION
    restored = restore_model(ckpt)
    for (n, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
        assert torch.equal(a, b), n


def test_save_load_save_is_byte_identical(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg)
    opt = AdamW(nn_core.ParamRegistry(model), weight_decay=1e-4)
    save_checkpoint(tmp_path / "one.ckpt", model, opt, step=3)
    tensors, meta = read_tensors(tmp_path / "one.ckpt")
    write_tensors(tmp_path / "two.ckpt", tensors, meta)
    assert (tmp_path / "one.ckpt").read_bytes() == (tmp_path / "two.ckpt").read_bytes()

    save_checkpoint(tmp_path / "m1.ckpt", model, None, step=3)
    restored = restore_model(load_checkpoint(tmp_path / "m1.ckpt"))
    save_checkpoint(tmp_path / "m2.ckpt", restored, None, step=3)
    assert (tmp_path / "m1.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


@pytest.mark.parametrize("where", [20, -10, -2])
def test_flipped_byte_detected(tmp_path, gen, where):
    path = tmp_path / "t.bin"
    write_tensors(path, sample_tensors(gen))
    blob = bytearray(path.read_bytes())
    blob[where] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        read_tensors(path)


@pytest.mark.parametrize("keep", [0, 10, 30, -1])
def test_truncation_detected(tmp_path, gen, keep):
    path = tmp_path / "t.bin"
    write_tensors(path, sample_tensors(gen))
    blob = path.read_bytes()
    path.write_bytes(blob[:keep])
    with pytest.raises(CheckpointError):
        read_tensors(path)


def test_bad_magic(gen):
    blob = encode_tensors(sample_tensors(gen))
    with pytest.raises(CheckpointError, match="magic"):
        decode_tensors(reseal(b"NOTACKPT" + blob[len(MAGIC):-4]))


def test_future_version_named(gen):
    blob = encode_tensors(sample_tensors(gen))
    body = blob[:len(MAGIC)] + struct.pack("<I", 2) + blob[len(MAGIC) + 4:-4]
    with pytest.raises(CheckpointError, match="version 2"):
        decode_tensors(reseal(body))


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "nope.bin")


def test_plain_tensor_file_is_not_a_model_checkpoint(tmp_path, gen):
    write_tensors(tmp_path / "t.bin", sample_tensors(gen))
    with pytest.raises(CheckpointError, match="not a model checkpoint"):
        load_checkpoint(tmp_path / "t.bin")


def test_failed_write_leaves_previous_file(tmp_path, gen, monkeypatch):
    path = tmp_path / "t.bin"
    write_tensors(path, sample_tensors(gen))
    before = path.read_bytes()

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(ck.os, "replace", boom)
    with pytest.raises(OSError):
        write_tensors(path, {"other": torch.zeros(3)})
    assert path.read_bytes() == before


def test_restore_reports_missing_tensors(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg)
    save_checkpoint(tmp_path / "m.ckpt", model, None, step=0)
    tensors, meta = read_tensors(tmp_path / "m.ckpt")
    del tensors["decoder.head.w"]
    write_tensors(tmp_path / "m.ckpt", tensors, meta)
    with pytest.raises(CheckpointError, match="decoder.head.w"):
        restore_model(load_checkpoint(tmp_path / "m.ckpt"))
