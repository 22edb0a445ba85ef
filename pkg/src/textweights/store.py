"""Bit-exact persistence: datasets (T2W1), checkpoints (T2WC), embeddings (JSONL).

Binary layout shared by both container formats::

    magic (4 bytes) | header length (u32 LE) | header (UTF-8 JSON) | payload

Dataset payload, per record (little-endian)::

    task_id u64 | k u32 | class_ids u32 x k | embedding f32 x E | weights f32 x d
    | train_acc f32 | test_acc f32

Checkpoint payload, per tensor in the order listed in the header::

    ndim u32 | dims u32 x ndim | values f32 x prod(dims)

Floats are stored as float32; in-memory records are rounded through float32
on construction so a write/read cycle is exact.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .weightspace import ChunkSpec, ParamSchema

DATASET_MAGIC = b"T2W1"
CHECKPOINT_MAGIC = b"T2WC"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class WeightRecord:
    task_id: int
    class_ids: tuple
    embedding: np.ndarray
    weights: np.ndarray
    train_accuracy: float
    test_accuracy: float

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        emb, w = _f32(self.embedding).reshape(-1), _f32(self.weights).reshape(-1)
        if not (np.all(np.isfinite(emb)) and np.all(np.isfinite(w))):
            raise ValueError(f"record {self.task_id}: non-finite values")
        for acc in (self.train_accuracy, self.test_accuracy):
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"record {self.task_id}: accuracy {acc} outside [0, 1]")
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "train_accuracy", float(np.float32(self.train_accuracy)))
        object.__setattr__(self, "test_accuracy", float(np.float32(self.test_accuracy)))


@dataclass
class WeightDataset:
    schema: ParamSchema
    embed_dim: int
    chunks: ChunkSpec
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @staticmethod
    def global_stats(records, spec: ChunkSpec) -> ChunkSpec:
        """Dataset-level per-block min/max (over all records and block entries)."""
        if not records:
            return spec.with_stats(np.zeros(spec.block_count), np.zeros(spec.block_count))
        W = np.stack([r.weights for r in records])
        W = np.concatenate([W, np.zeros((W.shape[0], spec.pad_length))], axis=1)
        B = W.reshape(W.shape[0], spec.block_count, spec.block_size)
        return spec.with_stats(B.min(axis=(0, 2)), B.max(axis=(0, 2)))

    def weights_matrix(self) -> np.ndarray:
        return np.stack([r.weights for r in self.records]) if self.records else \
            np.zeros((0, self.schema.d))

    def embeddings_matrix(self) -> np.ndarray:
        return np.stack([r.embedding for r in self.records]) if self.records else \
            np.zeros((0, self.embed_dim))

    def header(self) -> dict:
        c = self.chunks
        return {
            "format_version": FORMAT_VERSION,
            "feature_dim": self.schema.feature_dim,
            "hidden_dim": self.schema.hidden_dim,
            "d": self.schema.d,
            "embed_dim": self.embed_dim,
            "block_size": c.block_size,
            "block_count": c.block_count,
            "pad_length": c.pad_length,
            "block_min": [float(x) for x in c.mins],
            "block_max": [float(x) for x in c.maxs],
            "record_count": len(self.records),
            "meta": self.meta,
        }


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(h)) + h + payload


def _unpack(data: bytes, magic: bytes, what: str):
    if len(data) < 8:
        raise FormatError(f"{what} truncated: {len(data)} bytes")
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}: expected {magic.decode()!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise FormatError(f"{what} truncated inside header")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what} header is not valid JSON: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{what} format version {version} does not match reader version "
                          f"{FORMAT_VERSION}")
    return header, data[8 + hlen:]


def dataset_bytes(ds: WeightDataset) -> bytes:
    parts = []
    for r in ds.records:
        if r.embedding.size != ds.embed_dim or r.weights.size != ds.schema.d:
            raise ValueError(f"record {r.task_id} does not match the dataset dimensions")
        parts.append(struct.pack("<QI", r.task_id, len(r.class_ids)))
        parts.append(np.asarray(r.class_ids, dtype="<u4").tobytes())
        parts.append(r.embedding.astype("<f4").tobytes())
        parts.append(r.weights.astype("<f4").tobytes())
        parts.append(np.asarray([r.train_accuracy, r.test_accuracy], dtype="<f4").tobytes())
    return _pack(DATASET_MAGIC, ds.header(), b"".join(parts))


def write_dataset(path, ds: WeightDataset):
    _atomic_write(path, dataset_bytes(ds))


def parse_dataset(data: bytes) -> WeightDataset:
    header, body = _unpack(data, DATASET_MAGIC, "dataset")
    E, d = header["embed_dim"], header["d"]
    schema = ParamSchema(header["feature_dim"], header["hidden_dim"])
    if schema.d != d:
        raise FormatError("header d disagrees with feature/hidden dims")
    spec = ChunkSpec(header["block_size"], header["block_count"], header["pad_length"])
    spec = spec.with_stats(header["block_min"], header["block_max"])
    records, off = [], 0
    for i in range(header["record_count"]):
        if off + 12 > len(body):
            raise FormatError(f"dataset truncated at record {i}")
        task_id, k = struct.unpack_from("<QI", body, off)
        off += 12
        need = 4 * k + 4 * E + 4 * d + 8
        if off + need > len(body):
            raise FormatError(f"dataset truncated at record {i}")
        ids = np.frombuffer(body, "<u4", k, off)
        off += 4 * k
        emb = np.frombuffer(body, "<f4", E, off).astype(np.float64)
        off += 4 * E
        w = np.frombuffer(body, "<f4", d, off).astype(np.float64)
        off += 4 * d
        tr, te = np.frombuffer(body, "<f4", 2, off).astype(np.float64)
        off += 8
        if not (np.all(np.isfinite(emb)) and np.all(np.isfinite(w)) and np.isfinite(tr)
                and np.isfinite(te)):
            raise FormatError(f"record {i} holds non-finite floats")
        records.append(WeightRecord(int(task_id), tuple(ids.tolist()), emb, w, float(tr), float(te)))
    if off != len(body):
        raise FormatError(f"dataset has {len(body) - off} trailing bytes beyond "
                          f"{header['record_count']} declared records")
    return WeightDataset(schema, E, spec, records, header.get("meta", {}))


def read_dataset(path) -> WeightDataset:
    return parse_dataset(Path(path).read_bytes())


def checkpoint_bytes(header: dict, tensors: dict) -> bytes:
    header = dict(header, format_version=FORMAT_VERSION, tensors=list(tensors))
    parts = []
    for name, t in tensors.items():
        arr = np.asarray(t, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name} holds non-finite values")
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return _pack(CHECKPOINT_MAGIC, header, b"".join(parts))


def write_checkpoint(path, header: dict, tensors: dict):
    _atomic_write(path, checkpoint_bytes(header, tensors))


def parse_checkpoint(data: bytes) -> tuple[dict, dict]:
    header, body = _unpack(data, CHECKPOINT_MAGIC, "checkpoint")
    tensors, off = {}, 0
    for name in header.get("tensors", []):
        if off + 4 > len(body):
            raise FormatError(f"checkpoint truncated at tensor {name}")
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        if off + 4 * ndim > len(body):
            raise FormatError(f"checkpoint truncated at tensor {name}")
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if off + 4 * n > len(body):
            raise FormatError(f"checkpoint truncated at tensor {name}")
        arr = np.frombuffer(body, "<f4", n, off).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name} holds non-finite floats")
        tensors[name] = arr
        off += 4 * n
    if off != len(body):
        raise FormatError(f"checkpoint has {len(body) - off} unexpected trailing bytes")
    header = {k: v for k, v in header.items() if k not in ("tensors", "format_version")}
    return header, tensors


def read_checkpoint(path) -> tuple[dict, dict]:
    return parse_checkpoint(Path(path).read_bytes())


def write_embeddings(path, table: dict):
    lines = [json.dumps({"description": k, "vector": [float(x) for x in v]}) for k, v in table.items()]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")


def read_embeddings(path) -> dict:
    table, dim = {}, None
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        key, vec = obj["description"], np.asarray(obj["vector"], dtype=np.float64)
        if key in table:
            raise FormatError(f"duplicate embedding key {key!r} on line {n}")
        if dim is not None and vec.size != dim:
            raise FormatError(f"line {n}: vector length {vec.size} differs from {dim}")
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"line {n}: non-finite vector entries")
        dim = vec.size
        table[key] = vec
    return table


def write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def write_text(path, text: str):
    _atomic_write(path, text.encode("utf-8"))
