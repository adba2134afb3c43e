import json
import struct

import numpy as np
import pytest

from repsim_extract.writer import (
    WriterError,
    conforms_to_convention,
    write_activations,
    write_params_epoch,
    write_ranks,
)

from conftest import inspect_json, repsim


def test_convention_names():
    for good in ("embed", "final_norm", "block0.ln1", "block11.attn.qkv", "block3.mlp.fc2"):
        assert conforms_to_convention(good)
    for bad in ("x", "block.ln1", "blockA.ln1", "block0.conv", "head"):
        assert not conforms_to_convention(bad)


def test_header_bytes(tmp_path):
    path = tmp_path / "w.rs1"
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_activations(path, "m", ["a", "b"], [("block0.ln1", data)])
    buf = path.read_bytes()
    assert buf[:8] == b"REPSIM01"
    (meta_len,) = struct.unpack("<Q", buf[8:16])
    meta = json.loads(buf[16 : 16 + meta_len])
    assert list(meta) == ["kind", "model_id", "sample_ids", "tensors", "schema"]
    assert meta["tensors"][0]["offset"] % 64 == 0
    data_start = (16 + meta_len + 63) // 64 * 64
    values = np.frombuffer(buf, dtype="<f4", count=6, offset=data_start)
    assert values.tolist() == [0, 1, 2, 3, 4, 5]


def test_writer_is_deterministic(tmp_path):
    rng = np.random.default_rng(3)
    layers = [("block0.mlp.fc2", rng.standard_normal((3, 2, 4)).astype(np.float32))]
    p1, p2 = tmp_path / "a.rs1", tmp_path / "b.rs1"
    write_activations(p1, "m", ["x", "y", "z"], layers)
    write_activations(p2, "m", ["x", "y", "z"], layers)
    assert p1.read_bytes() == p2.read_bytes()


def test_engine_accepts_activations(tmp_path):
    path = tmp_path / "acts.rs1"
    rng = np.random.default_rng(5)
    write_activations(
        path,
        "writer-test",
        ["s0", "s1", "s2"],
        [("block0.ln1", rng.standard_normal((3, 5, 4)).astype(np.float32)),
         ("final_norm", rng.standard_normal((3, 5, 4)).astype(np.float32))],
    )
    info = inspect_json(path)
    assert info["kind"] == "activations"
    assert info["model_id"] == "writer-test"
    assert info["sample_ids"] == ["s0", "s1", "s2"]
    assert info["warnings"] == []


def test_engine_warns_on_off_convention_name(tmp_path):
    path = tmp_path / "odd.rs1"
    write_activations(path, "m", ["s0"], [("weird", np.ones((1, 4), np.float32))])
    info = inspect_json(path)
    assert len(info["warnings"]) == 1


def test_engine_accepts_ranks_and_params(tmp_path):
    ranks_path = tmp_path / "r.rs1"
    rng = np.random.default_rng(6)
    write_ranks(ranks_path, "m", ["a", "b"], np.stack([rng.permutation(5) for _ in range(2)]))
    info = inspect_json(ranks_path)
    assert info["kind"] == "ranks"
    assert info["num_classes"] == 5

    params_path = tmp_path / "epoch_0000.rs1"
    write_params_epoch(params_path, "m", 0, [("block0.attn.qkv", np.ones(8, np.float32))])
    info = inspect_json(params_path)
    assert info["kind"] == "params"
    assert info["epochs"] == [0]


def test_writer_validation(tmp_path):
    with pytest.raises(WriterError):
        write_activations(tmp_path / "x.rs1", "m", ["a"], [("l", np.ones((2, 3), np.float32))])
    with pytest.raises(WriterError):
        write_activations(tmp_path / "x.rs1", "m", ["a", "a"], [("l", np.ones((2, 3), np.float32))])
    with pytest.raises(WriterError):
        write_ranks(tmp_path / "x.rs1", "m", ["a"], np.array([[0, 0, 1]]))
    with pytest.raises(WriterError):
        write_params_epoch(tmp_path / "x.rs1", "m", 0, [("g", np.ones((2, 2), np.float32))])


def test_cross_writer_byte_compatibility(tmp_path):
    """The engine must re-emit byte-identical files for writer output.

    Round-tripping through `repsim` (read, rewrite via synth? no: inspect has
    no rewrite) is covered by reading values back out of the documented
    layout instead: parse the file independently and compare payloads.
    """
    rng = np.random.default_rng(7)
    data = rng.standard_normal((4, 3, 2)).astype(np.float32)
    path = tmp_path / "c.rs1"
    write_activations(path, "m", ["a", "b", "c", "d"], [("block0.mlp.fc1", data)])
    buf = path.read_bytes()
    (meta_len,) = struct.unpack("<Q", buf[8:16])
    meta = json.loads(buf[16 : 16 + meta_len])
    data_start = (16 + meta_len + 63) // 64 * 64
    entry = meta["tensors"][0]
    got = np.frombuffer(
        buf, dtype="<f4", count=entry["byte_len"] // 4, offset=data_start + entry["offset"]
    ).reshape(entry["shape"])
    assert np.array_equal(got, data)
