import numpy as np
import pytest

from uniadapt.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_dataset,
    read_arrays,
    save_checkpoint,
    save_dataset,
)
from uniadapt.lid_prefix import export_prefixes
from uniadapt.toy_data import gen_language

from conftest import randomize, tiny_vocab


def test_round_trip_is_bitwise_after_narrowing(tmp_path, tiny_params, rng):
    p = randomize(tiny_params, rng)
    save_checkpoint(tmp_path / "a.ckpt", p, tiny_vocab(3))
    q, vocab, manifest = load_checkpoint(tmp_path / "a.ckpt")
    for n in p.names():
        assert np.array_equal(q[n].data, p[n].data.astype(np.float32).astype(np.float64))
    save_checkpoint(tmp_path / "b.ckpt", q, vocab)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert q.config == p.config
    assert vocab.symbols == tiny_vocab(3).symbols


def test_frozen_flags_survive(tmp_path, tiny_params):
    save_checkpoint(tmp_path / "a.ckpt", tiny_params, tiny_vocab(3))
    q, _, _ = load_checkpoint(tmp_path / "a.ckpt")
    assert not q["embed.W"].requires_grad and q["head.W"].requires_grad


def test_exported_prefixes_stay_double(tmp_path, tiny_params, rng):
    p = export_prefixes(randomize(tiny_params, rng))
    save_checkpoint(tmp_path / "a.ckpt", p, tiny_vocab(3))
    manifest, arrays = read_arrays(tmp_path / "a.ckpt")
    kinds = {e["name"]: e["dtype"] for e in manifest["arrays"]}
    assert kinds["prefix_store.1.k"] == "<f8" and kinds["head.W"] == "<f4"
    assert np.array_equal(arrays["prefix_store.1.k"], p["prefix_store.1.k"].data)


def test_manifest_offsets_are_contiguous(tmp_path, tiny_params):
    save_checkpoint(tmp_path / "a.ckpt", tiny_params, tiny_vocab(3))
    manifest, _ = read_arrays(tmp_path / "a.ckpt")
    end = 0
    for e in manifest["arrays"]:
        assert e["offset"] == end
        end += e["nbytes"]
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw.startswith(MAGIC)
    header_len = raw.index(b"\n", len(MAGIC)) + 1
    assert len(raw) == header_len + end


def test_rejects_foreign_and_truncated_files(tmp_path, tiny_params):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
    save_checkpoint(tmp_path / "a.ckpt", tiny_params, tiny_vocab(3))
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_dataset_round_trip(tmp_path):
    from uniadapt.toy_data import ToyLanguageSpec

    s = ToyLanguageSpec(0, "abc", np.eye(4), np.zeros(4), sigma=0.4)
    utts = gen_language(s, 4, seed=0)
    save_dataset(tmp_path / "d.bin", utts, tiny_vocab(3))
    back, vocab, _ = load_dataset(tmp_path / "d.bin")
    assert [u.text for u in back] == [u.text for u in utts]
    assert all(np.array_equal(a.features, b.features) for a, b in zip(utts, back))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d.bin")
