"""Named-array checkpoint files.

Layout::

    UNIADAPT-CKPT 1\\n
    <manifest: one line of JSON>\\n
    <payload: little-endian arrays back to back>

The manifest carries the config, the vocabulary, free-form metadata and an
index of ``{name, shape, dtype, offset, nbytes}`` entries with offsets
relative to the payload start. Parameters are narrowed to float32; arrays
listed in ``keep_f64`` (exported prefixes) stay float64.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MAGIC = b"UNIADAPT-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def write_arrays(
    path: str | os.PathLike,
    arrays: dict[str, np.ndarray],
    header: dict,
    keep_f64: tuple[str, ...] = (),
) -> int:
    """Write ``arrays`` plus a JSON header; returns the file size in bytes."""
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        dtype = "<f8" if name.startswith(keep_f64) and keep_f64 else "<f4"
        buf = np.ascontiguousarray(arrays[name], dtype=dtype).tobytes()
        index.append(
            {
                "name": name,
                "shape": list(np.shape(arrays[name])),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(buf),
            }
        )
        chunks.append(buf)
        offset += len(buf)
    manifest = dict(header, arrays=index)
    line = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(line + b"\n")
        for c in chunks:
            f.write(c)
    return path.stat().st_size


def read_arrays(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, arrays)``; arrays come back as float64."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a uniadapt checkpoint")
        manifest = json.loads(f.readline())
        payload = f.read()
    arrays = {}
    for e in manifest["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: array {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64)
    return manifest, arrays


def save_checkpoint(path, params, vocab, extra: dict | None = None) -> int:
    header = {
        "format": "uniadapt-checkpoint",
        "config": params.config.to_dict(),
        "vocab": list(vocab.symbols),
        "pruned": bool(params.pruned),
        "meta": extra or {},
    }
    return write_arrays(path, params.arrays(), header, keep_f64=("prefix_store.",))


def load_checkpoint(path):
    """Return ``(ModelParams, Vocab, manifest)``."""
    from .ctc import Vocab
    from .model import ModelConfig, ModelParams

    manifest, arrays = read_arrays(path)
    if manifest.get("format") != "uniadapt-checkpoint":
        raise CheckpointError(f"{path} holds {manifest.get('format')!r}, not a model")
    config = ModelConfig.from_dict(manifest["config"])
    params = ModelParams.from_arrays(config, arrays, pruned=manifest.get("pruned", False))
    return params, Vocab(manifest["vocab"]), manifest


def save_dataset(path, utts, vocab, meta: dict | None = None) -> int:
    """Dump utterances in the same container: one feature array per utterance."""
    arrays = {f"utt.{i:06d}": u.features for i, u in enumerate(utts)}
    header = {
        "format": "uniadapt-dataset",
        "vocab": list(vocab.symbols),
        "utterances": [{"text": u.text, "lang": u.lang} for u in utts],
        "meta": meta or {},
    }
    return write_arrays(path, arrays, header, keep_f64=("utt.",))


def load_dataset(path):
    from .ctc import Vocab
    from .toy_data import Utterance

    manifest, arrays = read_arrays(path)
    if manifest.get("format") != "uniadapt-dataset":
        raise CheckpointError(f"{path} holds {manifest.get('format')!r}, not a dataset")
    utts = [
        Utterance(arrays[f"utt.{i:06d}"], u["text"], u["lang"])
        for i, u in enumerate(manifest["utterances"])
    ]
    return utts, Vocab(manifest["vocab"]), manifest
