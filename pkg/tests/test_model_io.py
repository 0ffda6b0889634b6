import struct

import numpy as np
import pytest

from utils.crnn import Crnn, CrnnConfig
from utils.errors import ModelFormatError
from utils.model_io import MAGIC, load_checkpoint, load_model, read_container, save_model, write_container


def test_save_load_forward_is_bitwise_identical(tmp_path, small_config, rng):
    model = Crnn(small_config, seed=9)
    for p in model.parameters():
        p.data += rng.standard_normal(p.shape).astype(np.float32) * 0.01
    path = save_model(model, str(tmp_path / "m.gpvd"))
    again = load_model(path)
    assert again.config == small_config
    x = rng.standard_normal((2, 37, 64))
    np.testing.assert_array_equal(again.forward(x), model.forward(x))


def test_saved_file_is_byte_stable(tmp_path, small_config):
    model = Crnn(small_config, seed=1)
    a = save_model(model, str(tmp_path / "a.gpvd"))
    b = save_model(load_model(a), str(tmp_path / "b.gpvd"))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_header_layout(tmp_path):
    path = write_container(str(tmp_path / "c.gpvd"), {"k": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    blob = open(path, "rb").read()
    assert blob[:4] == MAGIC
    version, header_len = struct.unpack_from("<II", blob, 4)
    assert version == 1
    assert blob[12:12 + header_len] == b'{"k":1}'
    pos = 12 + header_len
    assert struct.unpack_from("<H", blob, pos) == (1,)
    assert blob[pos + 2:pos + 3] == b"w"
    assert struct.unpack_from("<B2I", blob, pos + 3) == (2, 2, 3)


def test_extra_meta_and_tensors_survive(tmp_path, tiny_config):
    model = Crnn(tiny_config)
    path = save_model(model, str(tmp_path / "ck.gpvd"), extra_meta={"kind": "checkpoint", "step": 7},
                      extra_tensors={"adam.m.head.bias": np.ones(2, dtype=np.float32)})
    restored, meta, extra = load_checkpoint(path)
    assert meta["kind"] == "checkpoint"
    assert meta["step"] == 7
    assert list(extra) == ["adam.m.head.bias"]
    np.testing.assert_array_equal(extra["adam.m.head.bias"], np.ones(2))
    assert restored.config == tiny_config


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.gpvd"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ModelFormatError):
        read_container(str(path))


def test_truncated_file_raises(tmp_path, tiny_config):
    path = save_model(Crnn(tiny_config), str(tmp_path / "m.gpvd"))
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[:-7])
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_missing_model_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(str(tmp_path / "absent.gpvd"))


def test_teacher_labels_are_kept(tmp_path):
    cfg = CrnnConfig.teacher(["Speech", "Dog", "Music"], block_channels=(2, 2, 2), gru_hidden=4)
    path = save_model(Crnn(cfg), str(tmp_path / "t.gpvd"))
    assert load_model(path).config.labels == ("Speech", "Dog", "Music")
