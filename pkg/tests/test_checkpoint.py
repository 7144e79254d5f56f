import struct

import numpy as np
import pytest

from attn3d.checkpoint import load_checkpoint, save_checkpoint
from attn3d.errors import ClipIOError, ConfigError


def _tensors():
    rng = np.random.default_rng(0)
    return {"conv.weights": rng.normal(size=(2, 3, 3, 3, 3)).astype(np.float32),
            "conv.bias": np.array([np.float32(1e-38), -0.0], np.float32),
            "adam.t": np.array([12], np.float32)}


def test_round_trip_is_bit_exact(tmp_path):
    cfg = {"model": {"frames": 16}, "note": "ü"}
    save_checkpoint(tmp_path / "a.a3dc", cfg, _tensors())
    back_cfg, back = load_checkpoint(tmp_path / "a.a3dc")
    assert back_cfg == cfg
    assert list(back) == list(_tensors())
    assert all(back[k].tobytes() == v.tobytes() and back[k].shape == v.shape for k, v in _tensors().items())


def test_layout(tmp_path):
    save_checkpoint(tmp_path / "a.a3dc", {}, {"w": np.array([[1.0, 2.0]], np.float32)})
    raw = (tmp_path / "a.a3dc").read_bytes()
    assert raw[:4] == b"A3DC"
    version, n = struct.unpack("<IQ", raw[4:16])
    assert version == 1 and raw[16:16 + n] == b"{}"
    assert raw[-8:] == np.array([1.0, 2.0], "<f4").tobytes()


def test_no_temp_file_left(tmp_path):
    save_checkpoint(tmp_path / "a.a3dc", {}, _tensors())
    assert [p.name for p in tmp_path.iterdir()] == ["a.a3dc"]


def test_float64_stored_as_float32(tmp_path):
    save_checkpoint(tmp_path / "a.a3dc", {}, {"w": np.array([0.1], np.float64)})
    assert load_checkpoint(tmp_path / "a.a3dc")[1]["w"].tolist() == [np.float32(0.1)]


def test_bad_magic_truncation_and_trailing(tmp_path):
    p = tmp_path / "a.a3dc"
    save_checkpoint(p, {}, _tensors())
    raw = p.read_bytes()
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ClipIOError):
        load_checkpoint(p)
    p.write_bytes(raw[:-3])
    with pytest.raises(ClipIOError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(ClipIOError, match="trailing"):
        load_checkpoint(p)


def test_unknown_version(tmp_path):
    p = tmp_path / "a.a3dc"
    save_checkpoint(p, {}, {})
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(raw))
    with pytest.raises(ConfigError):
        load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(ClipIOError, match="none.a3dc"):
        load_checkpoint(tmp_path / "none.a3dc")
