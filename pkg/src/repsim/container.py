"""REPSIM01 single-file tensor container and the CSV label table.

Layout (bit-exact, little-endian throughout):

    bytes 0-7    ASCII magic "REPSIM01"
    bytes 8-15   u64 length M of the metadata block
    bytes 16-..  UTF-8 JSON metadata (M bytes)
    padding      zero bytes up to the next 64-byte file offset
    data region  row-major f32 tensors, each starting at a 64-byte-aligned
                 offset relative to the data-region start

Metadata keys, in this order:

    kind        "activations" | "ranks" | "params"
    model_id    str
    sample_ids  [str]            (empty for kind="params")
    epochs      [int]            (kind="params" only)
    tensors     [{"name": str, "shape": [int], "offset": int, "byte_len": int}]
    schema      1

For kind="params" each tensor is one flat parameter group of one snapshot,
named "e{epoch}/{group}". Serialization is deterministic: writing the same
set twice produces byte-identical files.
"""

from __future__ import annotations

import csv
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    BadMagicError,
    ContainerFormatError,
    DataError,
    SchemaVersionError,
    TruncatedContainerError,
)

MAGIC = b"REPSIM01"
SCHEMA_VERSION = 1
_ALIGN = 64

# ViT dump naming convention; per-block layers repeat for i = 0..blocks-1.
VIT_LAYER_TEMPLATES = (
    "embed",
    "block{i}.ln1",
    "block{i}.attn.qkv",
    "block{i}.attn.proj",
    "block{i}.ln2",
    "block{i}.mlp.fc1",
    "block{i}.mlp.fc2",
    "final_norm",
)

_BLOCK_RE = re.compile(r"^block(\d+)\.")


def _as_f32(values, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.size == 0:
        raise DataError(f"tensor {name!r} is empty")
    if not np.isfinite(arr).all():
        raise DataError(f"tensor {name!r} contains non-finite values")
    return arr


@dataclass
class TensorBlock:
    """One named f32 tensor. First axis is the sample axis for activations."""

    name: str
    data: np.ndarray

    def __post_init__(self) -> None:
        if not self.name:
            raise DataError("tensor name must be non-empty")
        self.data = _as_f32(self.data, self.name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class ActivationSet:
    """Per-layer activation tensors dumped from one model for N samples.

    Every layer is [N, T, d] (token-level, CLS token first) or [N, d]
    (already pooled); N must match len(sample_ids).
    """

    model_id: str
    sample_ids: list[str]
    layers: list[TensorBlock]

    def __post_init__(self) -> None:
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DataError("sample_ids contain duplicates")
        names = [t.name for t in self.layers]
        if len(set(names)) != len(names):
            raise DataError("layer names must be unique within a container")
        n = len(self.sample_ids)
        for t in self.layers:
            if t.data.ndim not in (2, 3):
                raise DataError(
                    f"layer {t.name!r} has rank {t.data.ndim}; expected [N, T, d] or [N, d]"
                )
            if t.data.shape[0] != n:
                raise DataError(
                    f"layer {t.name!r} has {t.data.shape[0]} samples, expected {n}"
                )

    def layer(self, name: str) -> TensorBlock:
        for t in self.layers:
            if t.name == name:
                return t
        raise DataError(f"no layer named {name!r} in {self.model_id!r}")

    @property
    def layer_names(self) -> list[str]:
        return [t.name for t in self.layers]

    def block_indices(self) -> list[int]:
        """Sorted block indices present per the naming convention."""
        seen = {int(m.group(1)) for m in map(_BLOCK_RE.match, self.layer_names) if m}
        return sorted(seen)


@dataclass
class RankTable:
    """Per-sample full class orderings from one classifier head.

    ranks[s] lists class indices by descending score; each row is a
    permutation of 0..C-1.
    """

    model_id: str
    sample_ids: list[str]
    ranks: np.ndarray

    def __post_init__(self) -> None:
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if self.ranks.ndim != 2:
            raise DataError("ranks must be a [N, C] array")
        n, c = self.ranks.shape
        if c < 2:
            raise DataError("rank tables need at least 2 classes")
        if n != len(self.sample_ids):
            raise DataError("ranks row count does not match sample_ids")
        if len(set(self.sample_ids)) != n:
            raise DataError("sample_ids contain duplicates")
        expected = np.arange(c)
        if not (np.sort(self.ranks, axis=1) == expected).all():
            raise DataError("every ranks row must be a permutation of 0..C-1")

    @property
    def num_classes(self) -> int:
        return int(self.ranks.shape[1])


@dataclass
class ParamSnapshot:
    """Flattened parameter groups at one epoch index."""

    epoch: int
    groups: list[tuple[str, np.ndarray]]

    def __post_init__(self) -> None:
        self.groups = [(name, _as_f32(vec, name)) for name, vec in self.groups]
        for name, vec in self.groups:
            if vec.ndim != 1:
                raise DataError(f"parameter group {name!r} must be a flat vector")

    def group_names(self) -> list[str]:
        return [name for name, _ in self.groups]


@dataclass
class ParamSnapshotSeries:
    """Per-epoch parameter snapshots; epoch indices strictly increasing."""

    model_id: str
    snapshots: list[ParamSnapshot]

    def __post_init__(self) -> None:
        if not self.snapshots:
            raise DataError("snapshot series is empty")
        epochs = [s.epoch for s in self.snapshots]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise DataError("epoch indices must be strictly increasing")
        first = self.snapshots[0]
        ref = [(name, vec.shape[0]) for name, vec in first.groups]
        if len({name for name, _ in ref}) != len(ref):
            raise DataError("duplicate group names within a snapshot")
        for snap in self.snapshots[1:]:
            got = [(name, vec.shape[0]) for name, vec in snap.groups]
            if got != ref:
                raise DataError(
                    f"epoch {snap.epoch} group names/lengths differ from epoch {first.epoch}"
                )

    @property
    def epochs(self) -> list[int]:
        return [s.epoch for s in self.snapshots]

    def group_names(self) -> list[str]:
        return self.snapshots[0].group_names()

    def group_matrix(self, name: str) -> np.ndarray:
        """Stack one group's vectors over epochs into a [T+1, dim] f64 array."""
        rows = []
        for snap in self.snapshots:
            for g, vec in snap.groups:
                if g == name:
                    rows.append(vec.astype(np.float64))
                    break
            else:
                raise DataError(f"no parameter group named {name!r}")
        return np.stack(rows)


@dataclass
class LabelTable:
    """sample_id -> class index, plus the class count."""

    labels: dict[str, int]
    num_classes: int

    def __post_init__(self) -> None:
        for sid, lab in self.labels.items():
            if not 0 <= lab < max(self.num_classes, 1):
                raise DataError(
                    f"label {lab} for sample {sid!r} outside [0, {self.num_classes})"
                )

    def vector(self, sample_ids: list[str]) -> np.ndarray:
        try:
            return np.array([self.labels[s] for s in sample_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"sample id {exc.args[0]!r} has no label") from None


@dataclass
class AlignmentResult:
    """Paired positional indices into two sample lists, in a's order."""

    indices_a: list[int]
    indices_b: list[int]
    unmatched_a: int
    unmatched_b: int

    def __len__(self) -> int:
        return len(self.indices_a)


def align_samples(a: ActivationSet | RankTable, b: ActivationSet | RankTable) -> AlignmentResult:
    """Pair up positions with equal sample ids, preserving a's order."""
    pos_b = {sid: j for j, sid in enumerate(b.sample_ids)}
    idx_a, idx_b = [], []
    for i, sid in enumerate(a.sample_ids):
        j = pos_b.get(sid)
        if j is not None:
            idx_a.append(i)
            idx_b.append(j)
    if not idx_a:
        raise AlignmentError("sample id sets are disjoint; nothing to compare")
    return AlignmentResult(
        indices_a=idx_a,
        indices_b=idx_b,
        unmatched_a=len(a.sample_ids) - len(idx_a),
        unmatched_b=len(b.sample_ids) - len(idx_b),
    )


# ---------------------------------------------------------------------------
# serialization


def _tensor_payload(obj) -> tuple[str, list[str], list[int] | None, list[TensorBlock]]:
    if isinstance(obj, ActivationSet):
        return "activations", obj.sample_ids, None, obj.layers
    if isinstance(obj, RankTable):
        block = TensorBlock("ranks", obj.ranks.astype(np.float32))
        if obj.num_classes >= 1 << 24:
            raise DataError("class indices above 2**24 do not round-trip through f32")
        return "ranks", obj.sample_ids, None, [block]
    if isinstance(obj, ParamSnapshotSeries):
        blocks = [
            TensorBlock(f"e{snap.epoch}/{name}", vec)
            for snap in obj.snapshots
            for name, vec in snap.groups
        ]
        return "params", [], obj.epochs, blocks
    raise DataError(f"cannot serialize object of type {type(obj).__name__}")


def _pad_to(n: int, align: int = _ALIGN) -> int:
    return (n + align - 1) // align * align


def write_container(obj, path) -> None:
    """Serialize a set to the REPSIM01 layout. Deterministic: same set, same bytes."""
    kind, sample_ids, epochs, blocks = _tensor_payload(obj)

    tensors_meta = []
    offset = 0
    for block in blocks:
        byte_len = block.data.size * 4
        tensors_meta.append(
            {
                "name": block.name,
                "shape": [int(s) for s in block.shape],
                "offset": offset,
                "byte_len": byte_len,
            }
        )
        offset = _pad_to(offset + byte_len)

    meta: dict = {"kind": kind, "model_id": obj.model_id, "sample_ids": sample_ids}
    if epochs is not None:
        meta["epochs"] = epochs
    meta["tensors"] = tensors_meta
    meta["schema"] = SCHEMA_VERSION
    meta_bytes = json.dumps(meta, separators=(",", ":"), ensure_ascii=True).encode("utf-8")

    data_start = _pad_to(16 + len(meta_bytes))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(b"\0" * (data_start - 16 - len(meta_bytes)))
        pos = 0
        for block, entry in zip(blocks, tensors_meta):
            fh.write(b"\0" * (entry["offset"] - pos))
            raw = block.data.astype("<f4", copy=False).tobytes(order="C")
            fh.write(raw)
            pos = entry["offset"] + len(raw)


def _read_metadata(buf: bytes, path) -> tuple[dict, int]:
    if buf[:8] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:8]!r}, expected {MAGIC!r}")
    if len(buf) < 16:
        raise TruncatedContainerError(f"{path}: header shorter than 16 bytes")
    (meta_len,) = struct.unpack("<Q", buf[8:16])
    if 16 + meta_len > len(buf):
        raise TruncatedContainerError(f"{path}: declared metadata overruns the file")
    try:
        meta = json.loads(buf[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: metadata is not valid JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise ContainerFormatError(f"{path}: metadata must be a JSON object")
    schema = meta.get("schema")
    if schema != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: unknown schema version {schema!r}")
    return meta, _pad_to(16 + meta_len)


def _read_blocks(buf: bytes, meta: dict, data_start: int, path) -> list[TensorBlock]:
    blocks = []
    for entry in meta.get("tensors", []):
        name = entry.get("name")
        shape = entry.get("shape")
        offset = entry.get("offset")
        byte_len = entry.get("byte_len")
        if not isinstance(name, str) or not isinstance(shape, list):
            raise ContainerFormatError(f"{path}: malformed tensor entry {entry!r}")
        if any(not isinstance(s, int) or s <= 0 for s in shape):
            raise ContainerFormatError(f"{path}: tensor {name!r} has non-positive shape {shape}")
        if offset % _ALIGN != 0:
            raise ContainerFormatError(f"{path}: tensor {name!r} offset {offset} not 64-byte aligned")
        expected = int(np.prod(shape)) * 4
        if byte_len != expected:
            raise ContainerFormatError(
                f"{path}: tensor {name!r} byte_len {byte_len} does not match shape {shape}"
            )
        lo = data_start + offset
        if lo + byte_len > len(buf):
            raise TruncatedContainerError(
                f"{path}: tensor {name!r} data (ends {lo + byte_len}) overruns file ({len(buf)} bytes)"
            )
        data = np.frombuffer(buf, dtype="<f4", count=expected // 4, offset=lo)
        blocks.append(TensorBlock(name, data.reshape(shape).copy()))
    return blocks


def read_container(path) -> ActivationSet | RankTable | ParamSnapshotSeries:
    """Read and validate a REPSIM01 container. Returns the stored set exactly."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    buf = path.read_bytes()
    meta, data_start = _read_metadata(buf, path)
    blocks = _read_blocks(buf, meta, data_start, path)

    kind = meta.get("kind")
    model_id = meta.get("model_id", "")
    sample_ids = meta.get("sample_ids", [])
    if kind == "activations":
        return ActivationSet(model_id=model_id, sample_ids=sample_ids, layers=blocks)
    if kind == "ranks":
        if len(blocks) != 1 or blocks[0].name != "ranks":
            raise ContainerFormatError(f"{path}: ranks container must hold a single 'ranks' tensor")
        ranks = np.rint(blocks[0].data.astype(np.float64)).astype(np.int64)
        return RankTable(model_id=model_id, sample_ids=sample_ids, ranks=ranks)
    if kind == "params":
        epochs = meta.get("epochs")
        if not isinstance(epochs, list) or not epochs:
            raise ContainerFormatError(f"{path}: params container missing 'epochs' list")
        by_epoch: dict[int, list[tuple[str, np.ndarray]]] = {e: [] for e in epochs}
        for block in blocks:
            head, sep, group = block.name.partition("/")
            if not sep or not head.startswith("e"):
                raise ContainerFormatError(f"{path}: params tensor {block.name!r} not named e<epoch>/<group>")
            try:
                epoch = int(head[1:])
            except ValueError:
                raise ContainerFormatError(f"{path}: bad epoch prefix in {block.name!r}") from None
            if epoch not in by_epoch:
                raise ContainerFormatError(f"{path}: tensor {block.name!r} cites undeclared epoch {epoch}")
            by_epoch[epoch].append((group, block.data))
        snapshots = [ParamSnapshot(epoch=e, groups=by_epoch[e]) for e in epochs]
        return ParamSnapshotSeries(model_id=model_id, snapshots=snapshots)
    raise ContainerFormatError(f"{path}: unknown container kind {kind!r}")


def read_param_dir(directory) -> ParamSnapshotSeries:
    """Assemble a series from a directory of per-epoch containers.

    Files are taken in lexicographic order (the writer names them
    epoch_0000.rs1, epoch_0001.rs1, ...); each holds one or more snapshots.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(directory.glob("epoch_*.rs1"))
    if not files:
        raise DataError(f"{directory}: no epoch_*.rs1 files")
    snapshots: list[ParamSnapshot] = []
    model_id = ""
    for f in files:
        series = read_container(f)
        if not isinstance(series, ParamSnapshotSeries):
            raise DataError(f"{f}: expected a params container, got {type(series).__name__}")
        model_id = series.model_id
        snapshots.extend(series.snapshots)
    return ParamSnapshotSeries(model_id=model_id, snapshots=snapshots)


def write_param_dir(series: ParamSnapshotSeries, directory) -> list[Path]:
    """Write one container per snapshot as epoch_{index:04d}.rs1."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for snap in series.snapshots:
        single = ParamSnapshotSeries(model_id=series.model_id, snapshots=[snap])
        out = directory / f"epoch_{snap.epoch:04d}.rs1"
        write_container(single, out)
        paths.append(out)
    return paths


_NUM_CLASSES_RE = re.compile(r"#\s*num_classes\s*=\s*(\d+)")


def read_labels(path) -> LabelTable:
    """Read a "sample_id,label" CSV.

    num_classes defaults to 1 + max label; a comment line "# num_classes=K"
    anywhere in the file overrides it. Empty files (after the header) yield
    an empty table with num_classes 0.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    labels: dict[str, int] = {}
    override = None
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    data_rows: list[tuple[int, list[str]]] = []
    for lineno, row in enumerate(rows, start=1):
        if not row or not any(cell.strip() for cell in row):
            continue
        if row[0].lstrip().startswith("#"):
            m = _NUM_CLASSES_RE.search(",".join(row))
            if m:
                override = int(m.group(1))
            continue
        data_rows.append((lineno, row))
    if not data_rows:
        raise DataError(f"{path}: missing 'sample_id,label' header")
    header_line, header = data_rows[0]
    if [c.strip().lower() for c in header[:2]] != ["sample_id", "label"]:
        raise DataError(f"{path}:{header_line}: header must be 'sample_id,label'")
    for lineno, row in data_rows[1:]:
        if len(row) < 2:
            raise DataError(f"{path}:{lineno}: expected 'sample_id,label'")
        sid = row[0].strip()
        try:
            lab = int(row[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
        if lab < 0:
            raise DataError(f"{path}:{lineno}: negative label {lab}")
        if sid in labels:
            raise DataError(f"{path}:{lineno}: duplicate sample_id {sid!r}")
        labels[sid] = lab
    inferred = 1 + max(labels.values()) if labels else 0
    num_classes = override if override is not None else inferred
    if labels and num_classes <= max(labels.values()):
        raise DataError(f"{path}: num_classes override {num_classes} below max label")
    return LabelTable(labels=labels, num_classes=num_classes)


def write_labels(table: LabelTable, path) -> None:
    """Inverse of read_labels; emits the num_classes override comment."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# num_classes={table.num_classes}\n")
        fh.write("sample_id,label\n")
        for sid, lab in table.labels.items():
            fh.write(f"{sid},{lab}\n")
