import struct

import numpy as np
import pytest

from lslu.checkpoint import decode, encode, load_checkpoint, load_into_graph, save_checkpoint, save_graph
from lslu.errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch
from lslu.networks import build_mini_resnet, build_mini_vanillanet


def trained_like(rng):
    g = build_mini_vanillanet(depth=4, width=8, n_terms=3)
    for t in g.parameters():
        t.data[...] = rng.standard_normal(t.shape).astype(t.dtype)
    return g


def test_round_trip_bitwise(tmp_path, rng):
    g = trained_like(rng)
    meta = {"epoch": 3, "config_hash": "abc", "rng": [1, 2, 3]}
    first = save_graph(tmp_path / "a.lslu", g, meta)
    ckpt = load_checkpoint(tmp_path / "a.lslu")
    assert ckpt.meta == meta
    for key, value in g.state_dict().items():
        assert np.asarray(value).tobytes() == ckpt.tensors[key].tobytes()
    second = save_checkpoint(tmp_path / "b.lslu", ckpt.tensors, ckpt.meta)
    assert first == second


def test_load_into_graph(rng):
    g = trained_like(rng)
    h = build_mini_vanillanet(depth=4, width=8, n_terms=3, seed=9)
    load_into_graph(decode(encode(g.state_dict(), {})), h)
    for layer_g, layer_h in zip(g.lslu_layers(), h.lslu_layers()):
        for kind in ("theta", "omega", "alpha", "bias"):
            assert getattr(layer_g.p, kind).data.tobytes() == getattr(layer_h.p, kind).data.tobytes()


def test_mismatched_architecture(rng):
    raw = encode(trained_like(rng).state_dict(), {})
    with pytest.raises(ShapeMismatch, match="stem"):
        load_into_graph(decode(raw), build_mini_vanillanet(depth=4, width=16, n_terms=3))
    with pytest.raises(ShapeMismatch, match="missing"):
        load_into_graph(decode(raw), build_mini_resnet((1, 1), width=8))


def test_truncated(rng):
    raw = encode({"w": rng.standard_normal((3, 3))}, {"a": 1})
    for cut in (3, 10, 20, len(raw) - 1):
        with pytest.raises(CorruptCheckpoint):
            decode(raw[:cut])
    with pytest.raises(CorruptCheckpoint):
        decode(raw + b"\x00")


def test_bad_magic_and_version():
    raw = encode({}, {})
    with pytest.raises(CorruptCheckpoint):
        decode(b"XXXX" + raw[4:])
    with pytest.raises(VersionMismatch):
        decode(raw[:4] + struct.pack("<I", 99) + raw[8:])


def test_wire_layout():
    raw = encode({"ab": np.array([1.5], dtype=np.float32)}, {})
    assert raw[:4] == b"LSLU"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<H", raw[12:14]) == (2,)
    assert raw[14:16] == b"ab"
    assert struct.unpack("<BBI", raw[16:22]) == (0, 1, 1)
    assert struct.unpack("<f", raw[22:26]) == (1.5,)


def test_dtypes_preserved():
    tensors = {"f32": np.ones(2, np.float32), "f64": np.ones(2), "i": np.arange(3), "u": np.zeros(2, np.uint8)}
    back = decode(encode(tensors, {})).tensors
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()
    with pytest.raises(TypeError):
        encode({"c": np.ones(2, np.complex64)}, {})
