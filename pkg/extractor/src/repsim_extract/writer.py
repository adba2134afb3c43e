"""Standalone REPSIM01 writer.

Implements the container contract from the engine's format documentation
without importing the engine: magic "REPSIM01", u64 little-endian metadata
length, compact ASCII-escaped JSON metadata with keys in the order kind,
model_id, sample_ids, [epochs,] [extra informational keys,] tensors, schema,
zero padding to the next 64-byte boundary, then row-major little-endian f32
tensors at 64-byte-aligned offsets relative to the data-region start.
Writing the same payload twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"REPSIM01"
SCHEMA_VERSION = 1
_ALIGN = 64

# layer names the engine accepts without warnings
CONVENTION_SINGLETONS = ("embed", "final_norm")
CONVENTION_BLOCK_SUFFIXES = ("ln1", "ln2", "attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")


class WriterError(ValueError):
    pass


def conforms_to_convention(name: str) -> bool:
    if name in CONVENTION_SINGLETONS:
        return True
    head, sep, rest = name.partition(".")
    return bool(sep and head.startswith("block") and head[5:].isdigit()
                and rest in CONVENTION_BLOCK_SUFFIXES)


def _check_tensor(name: str, array: np.ndarray) -> np.ndarray:
    if not name:
        raise WriterError("tensor name must be non-empty")
    array = np.ascontiguousarray(array, dtype=np.float32)
    if array.size == 0:
        raise WriterError(f"tensor {name!r} is empty")
    if not np.isfinite(array).all():
        raise WriterError(f"tensor {name!r} contains non-finite values")
    return array


def _pad(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def _write(path, kind: str, model_id: str, sample_ids: list[str],
           tensors: list[tuple[str, np.ndarray]], epochs: list[int] | None = None,
           extra: dict | None = None) -> None:
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise WriterError("duplicate tensor names")
    if len(set(sample_ids)) != len(sample_ids):
        raise WriterError("duplicate sample ids")
    arrays = [(n, _check_tensor(n, a)) for n, a in tensors]

    entries = []
    offset = 0
    for name, array in arrays:
        byte_len = array.size * 4
        entries.append({"name": name, "shape": [int(s) for s in array.shape],
                        "offset": offset, "byte_len": byte_len})
        offset = _pad(offset + byte_len)

    meta: dict = {"kind": kind, "model_id": model_id, "sample_ids": list(sample_ids)}
    if epochs is not None:
        meta["epochs"] = [int(e) for e in epochs]
    if extra:
        meta.update(extra)
    meta["tensors"] = entries
    meta["schema"] = SCHEMA_VERSION
    blob = json.dumps(meta, separators=(",", ":"), ensure_ascii=True).encode("utf-8")

    data_start = _pad(16 + len(blob))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(b"\0" * (data_start - 16 - len(blob)))
        pos = 0
        for (_, array), entry in zip(arrays, entries):
            fh.write(b"\0" * (entry["offset"] - pos))
            raw = array.astype("<f4", copy=False).tobytes(order="C")
            fh.write(raw)
            pos = entry["offset"] + len(raw)


def write_activations(path, model_id: str, sample_ids: list[str],
                      layers: list[tuple[str, np.ndarray]], extra: dict | None = None) -> None:
    n = len(sample_ids)
    for name, array in layers:
        if array.ndim not in (2, 3):
            raise WriterError(f"layer {name!r} must be [N, T, d] or [N, d], got rank {array.ndim}")
        if array.shape[0] != n:
            raise WriterError(f"layer {name!r} has {array.shape[0]} rows for {n} sample ids")
    _write(path, "activations", model_id, sample_ids, layers, extra=extra)


def write_ranks(path, model_id: str, sample_ids: list[str], ranks: np.ndarray) -> None:
    ranks = np.asarray(ranks)
    if ranks.ndim != 2 or ranks.shape[0] != len(sample_ids):
        raise WriterError("ranks must be [N, C] with one row per sample id")
    c = ranks.shape[1]
    if c >= 1 << 24:
        raise WriterError("class indices above 2**24 do not round-trip through f32")
    expected = np.arange(c)
    if not (np.sort(ranks, axis=1) == expected).all():
        raise WriterError("every ranks row must be a permutation of 0..C-1")
    _write(path, "ranks", model_id, sample_ids, [("ranks", ranks.astype(np.float32))])


def write_params_epoch(path, model_id: str, epoch: int,
                       groups: list[tuple[str, np.ndarray]]) -> None:
    tensors = []
    for name, vec in groups:
        vec = np.asarray(vec)
        if vec.ndim != 1:
            raise WriterError(f"parameter group {name!r} must be a flat vector")
        tensors.append((f"e{epoch}/{name}", vec))
    _write(path, "params", model_id, [], tensors, epochs=[int(epoch)])
