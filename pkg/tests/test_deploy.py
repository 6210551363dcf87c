import json
import struct

import numpy as np
import pytest
from conftest import toy_weights

from matryoshka3d.deploy import (
    MAGIC,
    dump_manifest,
    embedding_parameter_count,
    load_checkpoint,
    load_model,
    materialize_compatibility,
    read_manifest,
    refactorize,
    save_model,
    set_num_hidden_layers,
    tensor_count,
    to_compatibility,
    to_efficiency,
    truncate_dims,
)
from matryoshka3d.errors import FormatError, NumericalError, ParameterError, UsageError
from matryoshka3d.model import ModelConfig, embed, forward_taps, init_model

TEXTS = ["one two three", "four", "", "five six seven eight nine"]


def params_equal(a, b):
    pa, pb = a.named_parameters(), b.named_parameters()
    return list(pa) == list(pb) and all(
        pa[k].data.dtype == pb[k].data.dtype and np.array_equal(pa[k].data, pb[k].data) for k in pa
    )


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bit_identical(tmp_path, dtype):
    w = toy_weights(dtype=dtype)
    save_model(w, tmp_path / "m.m3d")
    back = load_model(tmp_path / "m.m3d")
    assert back.config == w.config and params_equal(back, w)


def test_extra_tensors_round_trip(tmp_path):
    w = toy_weights()
    extra = {"optim.m.x": np.arange(6.0).reshape(2, 3)}
    save_model(w, tmp_path / "m.m3d", extra={"note": 1}, extra_tensors=extra)
    ck = load_checkpoint(tmp_path / "m.m3d")
    assert ck.extra == {"note": 1}
    np.testing.assert_array_equal(ck.extra_tensors["optim.m.x"], extra["optim.m.x"])


def test_payload_is_little_endian_and_contiguous(tmp_path):
    w = toy_weights()
    save_model(w, tmp_path / "m.m3d")
    m = read_manifest(tmp_path / "m.m3d")
    offset = 0
    for e in m["tensors"]:
        assert e["offset"] == offset and e["dtype"] == "<f8"
        offset += e["length"]
    raw = (tmp_path / "m.m3d").read_bytes()
    assert raw.startswith(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    payload = raw[len(MAGIC) + 8 + hlen :]
    assert len(payload) == offset
    first = m["tensors"][0]
    stored = np.frombuffer(payload[: first["length"]], dtype="<f8").reshape(first["shape"])
    np.testing.assert_array_equal(stored, w.named_parameters()[first["name"]].data)


def test_manifest_prune_matches_tap(tmp_path):
    w = init_model(ModelConfig(vocab_size=256, d_model=16, n_layers=8, n_heads=2, d_ff=32,
                               mel_rank=8, mel_rank_set=(4, 8), mrl_dims=(8, 16)), seed=1)
    save_model(w, tmp_path / "full.m3d")
    set_num_hidden_layers(tmp_path / "full.m3d", 2, tmp_path / "two.m3d")
    pruned = load_model(tmp_path / "two.m3d")
    assert pruned.config.n_layers == 2 and len(pruned.layers) == 2
    assert read_manifest(tmp_path / "two.m3d")["stored_layers"] == 8
    ref = embed(w, TEXTS, depth=2)
    assert np.abs(embed(pruned, TEXTS) - ref).max() <= 1e-6
    with pytest.raises(UsageError):
        forward_taps(pruned, [[1, 5, 2]], layers=[4])


def test_manifest_cannot_exceed_stored_layers(tmp_path):
    save_model(toy_weights(), tmp_path / "m.m3d")
    with pytest.raises(FormatError):
        set_num_hidden_layers(tmp_path / "m.m3d", 3)


def corrupt(path, fn):
    raw = bytearray(path.read_bytes())
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    manifest = json.loads(raw[start : start + hlen])
    payload = raw[start + hlen :]
    manifest, payload = fn(manifest, payload)
    header = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + bytes(payload))


@pytest.mark.parametrize(
    "fn",
    [
        lambda m, p: (m, p[:-8]),
        lambda m, p: (m, p + b"\0" * 8),
        lambda m, p: ({**m, "format_version": 99}, p),
        lambda m, p: ({**m, "tensors": [{**m["tensors"][0], "offset": 8}] + m["tensors"][1:]}, p),
        lambda m, p: ({**m, "tensors": [{**m["tensors"][0], "dtype": "<i4"}] + m["tensors"][1:]}, p),
        lambda m, p: ({**m, "embedding_mode": "dense"}, p),
    ],
    ids=["truncated", "trailing", "version", "offset", "dtype", "mode"],
)
def test_corruption_is_format_error(tmp_path, fn):
    path = tmp_path / "m.m3d"
    save_model(toy_weights(), path)
    corrupt(path, fn)
    with pytest.raises(FormatError):
        load_model(path)


def test_bad_magic(tmp_path):
    (tmp_path / "x.m3d").write_bytes(b"nope" * 10)
    with pytest.raises(FormatError):
        load_model(tmp_path / "x.m3d")


def test_non_finite_refused(tmp_path):
    w = toy_weights()
    w.final_norm.data[0] = np.inf
    with pytest.raises(NumericalError):
        save_model(w, tmp_path / "m.m3d")


def test_dense_mode_stores_product(tmp_path):
    w = toy_weights()
    save_model(w, tmp_path / "d.m3d", mode="dense")
    m = read_manifest(tmp_path / "d.m3d")
    assert m["embedding_mode"] == "dense" and m["stored_rank"] is None
    back = load_model(tmp_path / "d.m3d")
    np.testing.assert_array_equal(back.embedding.E.data, w.embedding.A.data @ w.embedding.B.data)
    assert back.embedding.E.shape == (64, 16)


def test_mode_equivalence_32bit(tmp_path):
    w = toy_weights(dtype=np.float32)
    save_model(w, tmp_path / "f.m3d", mode="factorized")
    save_model(w, tmp_path / "d.m3d", mode="dense")
    a, b = embed(load_model(tmp_path / "f.m3d"), TEXTS), embed(load_model(tmp_path / "d.m3d"), TEXTS)
    assert np.abs(a - b).max() <= 1e-6


def test_compatibility_forward_64bit():
    w = toy_weights()
    assert np.abs(embed(w, TEXTS) - embed(to_compatibility(w), TEXTS)).max() <= 1e-10
    assert materialize_compatibility(w.embedding).shape == (64, 16)


def test_refactorize_full_rank_and_monotone():
    E = np.random.default_rng(0).normal(size=(64, 16))
    fe = refactorize(E, 16)
    assert np.linalg.norm(fe.A.data @ fe.B.data - E) / np.linalg.norm(E) <= 1e-8
    errs = [np.linalg.norm(refactorize(E, r).A.data @ refactorize(E, r).B.data - E) for r in range(1, 17)]
    assert all(b <= a + 1e-10 for a, b in zip(errs, errs[1:]))


def test_efficiency_mode(tmp_path):
    w = toy_weights()
    assert to_efficiency(w) is w
    small = to_efficiency(w, 2)
    assert small.config.mel_rank == 2 and small.embedding.A.shape == (64, 2)
    save_model(small, tmp_path / "e.m3d")
    assert read_manifest(tmp_path / "e.m3d")["stored_rank"] == 2
    with pytest.raises(UsageError):
        to_efficiency(to_compatibility(w))
    with pytest.raises(UsageError):
        save_model(to_compatibility(w), tmp_path / "x.m3d", mode="factorized")


def test_parameter_counts():
    assert embedding_parameter_count(4096, 64) == 262144
    assert embedding_parameter_count(4096, 64, 8) == 33280
    w = toy_weights()
    assert tensor_count(w.config) == len(w.named_parameters())
    assert tensor_count(w.config.with_rank(None)) == len(to_compatibility(w).named_parameters())


def test_truncate_dims():
    np.testing.assert_allclose(truncate_dims([3.0, 4.0, 0.0, 0.0], 2), [0.6, 0.8], atol=1e-15)
    v = np.random.default_rng(1).normal(size=(5, 8))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    np.testing.assert_allclose(truncate_dims(v, 8), v, atol=1e-7)
    t = truncate_dims(v, 3)
    raw = v[:2, :3]
    cos = raw[0] @ raw[1] / (np.linalg.norm(raw[0]) * np.linalg.norm(raw[1]))
    assert t[0] @ t[1] == pytest.approx(cos, abs=1e-12)
    with pytest.raises(NumericalError):
        truncate_dims([0.0, 0.0, 1.0], 2)
    with pytest.raises(ParameterError):
        truncate_dims(v, 9)


def test_dump_manifest(tmp_path):
    w = toy_weights()
    save_model(w, tmp_path / "m.m3d")
    text = dump_manifest(tmp_path / "m.m3d")
    assert "embedding_mode     factorized" in text
    assert f"tensors            {tensor_count(w.config)}" in text
