"""Flat weight layout, block chunking/normalization and hidden-unit permutations.

Head weights are ``W1`` (F x r) and ``W2`` (r x F).  The canonical flat order
is ``W1`` row-major followed by ``W2`` row-major.  A permutation ``g`` of the
hidden units acts as ``W1' = W1 P`` and ``W2' = P^T W2`` with ``P[j, g[j]] = 1``,
i.e. hidden unit ``j`` is moved to slot ``g[j]``.  Under this convention
``apply(apply(w, g2), g1) == apply(w, compose(g1, g2))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ParamSchema:
    feature_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.feature_dim < 1 or self.hidden_dim < 1:
            raise ValueError("schema dimensions must be positive")

    @property
    def d(self) -> int:
        return 2 * self.feature_dim * self.hidden_dim

    @property
    def layer_slices(self) -> tuple[slice, slice]:
        half = self.feature_dim * self.hidden_dim
        return slice(0, half), slice(half, 2 * half)

    def pad_length(self, block_size: int) -> int:
        return (-self.d) % block_size


@dataclass(frozen=True)
class FlatWeights:
    schema: ParamSchema
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.schema.d:
            raise ValueError(f"flat weights length {v.shape[0]} != schema d {self.schema.d}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flat weights contain non-finite entries")
        object.__setattr__(self, "values", v)

    def unflatten(self):
        return unflatten(self)


@dataclass(frozen=True)
class ChunkSpec:
    block_size: int
    block_count: int
    pad_length: int
    mins: np.ndarray | None = field(default=None, compare=False)
    maxs: np.ndarray | None = field(default=None, compare=False)

    def with_stats(self, mins, maxs) -> "ChunkSpec":
        mins = np.asarray(mins, dtype=np.float64).reshape(-1)
        maxs = np.asarray(maxs, dtype=np.float64).reshape(-1)
        if mins.shape != (self.block_count,) or maxs.shape != (self.block_count,):
            raise ValueError("block statistics must have one entry per block")
        if np.any(mins > maxs):
            raise ValueError("block min exceeds block max")
        return ChunkSpec(self.block_size, self.block_count, self.pad_length, mins, maxs)

    @property
    def padded_dim(self) -> int:
        return self.block_size * self.block_count


@dataclass(frozen=True)
class PermSpec:
    permutation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.permutation, dtype=np.int64).reshape(-1)
        if p.size == 0 or not np.array_equal(np.sort(p), np.arange(p.size)):
            raise ValueError("permutation must be a bijection on 0..r-1")
        object.__setattr__(self, "permutation", p)

    def __len__(self):
        return self.permutation.size

    @classmethod
    def identity(cls, r: int) -> "PermSpec":
        return cls(np.arange(r))

    def inverse(self) -> "PermSpec":
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.permutation.size)
        return PermSpec(inv)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.permutation, np.arange(self.permutation.size)))


def compose(g1: PermSpec, g2: PermSpec) -> PermSpec:
    """The permutation that applies ``g2`` first and then ``g1``."""
    if len(g1) != len(g2):
        raise ValueError("cannot compose permutations of different sizes")
    return PermSpec(g1.permutation[g2.permutation])


def flatten(W1, W2, schema: ParamSchema) -> FlatWeights:
    W1 = np.asarray(W1, dtype=np.float64)
    W2 = np.asarray(W2, dtype=np.float64)
    F, r = schema.feature_dim, schema.hidden_dim
    if W1.shape != (F, r) or W2.shape != (r, F):
        raise ValueError(f"expected W1 {(F, r)} and W2 {(r, F)}, got {W1.shape} and {W2.shape}")
    return FlatWeights(schema, np.concatenate([W1.reshape(-1), W2.reshape(-1)]))


def unflatten(flat: FlatWeights) -> tuple[np.ndarray, np.ndarray]:
    F, r = flat.schema.feature_dim, flat.schema.hidden_dim
    s1, s2 = flat.schema.layer_slices
    return flat.values[s1].reshape(F, r).copy(), flat.values[s2].reshape(r, F).copy()


def chunk_spec(d: int, block_size: int) -> ChunkSpec:
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    count = math.ceil(d / block_size)
    return ChunkSpec(block_size, count, count * block_size - d)


def chunk_spec_for_count(d: int, block_count: int) -> ChunkSpec:
    """Smallest uniform block size giving exactly ``block_count`` blocks."""
    if block_count < 1 or block_count > d:
        raise ValueError("block count must lie in 1..d")
    size = math.ceil(d / block_count)
    return ChunkSpec(size, block_count, size * block_count - d)


def chunk(flat, block_size: int) -> tuple[list[np.ndarray], ChunkSpec]:
    """Split into uniform blocks, zero-padding the last one."""
    values = flat.values if isinstance(flat, FlatWeights) else np.asarray(flat, dtype=np.float64)
    spec = chunk_spec(values.size, block_size)
    padded = np.concatenate([values, np.zeros(spec.pad_length)])
    return [b.copy() for b in padded.reshape(spec.block_count, block_size)], spec


def unchunk(blocks, spec: ChunkSpec) -> np.ndarray:
    flat = np.concatenate([np.asarray(b, dtype=np.float64).reshape(-1) for b in blocks])
    if flat.size != spec.padded_dim:
        raise ValueError("block sizes do not match the chunk spec")
    return flat[:flat.size - spec.pad_length] if spec.pad_length else flat


def block_stats(blocks) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(blocks, dtype=np.float64)
    return arr.min(axis=1), arr.max(axis=1)


def normalize_blocks(blocks, spec: ChunkSpec | None = None):
    """Min-max scale each block to [-1, 1].

    If ``spec`` already carries min/max statistics (e.g. dataset-level ones)
    they are used as-is; otherwise per-block statistics are measured.  A
    degenerate block (min == max) maps to zeros.
    """
    arr = np.asarray(blocks, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a non-empty list of equal-size blocks")
    if spec is None:
        spec = chunk_spec(arr.size, arr.shape[1])
    if spec.mins is None:
        spec = spec.with_stats(*block_stats(arr))
    lo, hi = spec.mins[:, None], spec.maxs[:, None]
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, 2.0 * (arr - lo) / safe - 1.0, 0.0)
    return [row.copy() for row in out], spec


def denormalize_blocks(blocks, spec: ChunkSpec):
    arr = np.asarray(blocks, dtype=np.float64)
    lo, hi = spec.mins[:, None], spec.maxs[:, None]
    span = hi - lo
    out = np.where(span > 0, (arr + 1.0) * 0.5 * span + lo, lo)
    return [row.copy() for row in out]


def to_normalized(values: np.ndarray, spec: ChunkSpec) -> np.ndarray:
    """Batch helper: rows of flat weights (n x d) -> normalized padded rows (n x s*Nc)."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    padded = np.concatenate([values, np.zeros((values.shape[0], spec.pad_length))], axis=1)
    b = padded.reshape(values.shape[0], spec.block_count, spec.block_size)
    lo, hi = spec.mins[None, :, None], spec.maxs[None, :, None]
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, 2.0 * (b - lo) / safe - 1.0, 0.0)
    return out.reshape(values.shape[0], -1)


def from_normalized(rows: np.ndarray, spec: ChunkSpec) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    b = rows.reshape(rows.shape[0], spec.block_count, spec.block_size)
    lo, hi = spec.mins[None, :, None], spec.maxs[None, :, None]
    span = hi - lo
    out = np.where(span > 0, (b + 1.0) * 0.5 * span + lo, lo)
    out = out.reshape(rows.shape[0], -1)
    return out[:, :out.shape[1] - spec.pad_length] if spec.pad_length else out


def sample_permutation(rng: np.random.Generator, r: int) -> PermSpec:
    """Uniform draw from the r! hidden-unit permutations (Fisher-Yates)."""
    if r < 1:
        raise ValueError("r must be >= 1")
    p = np.arange(r)
    for i in range(r - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        p[i], p[j] = p[j], p[i]
    return PermSpec(p)


def _permute_structured(W1, W2, g: PermSpec):
    W1p = np.empty_like(W1)
    W2p = np.empty_like(W2)
    W1p[:, g.permutation] = W1
    W2p[g.permutation, :] = W2
    return W1p, W2p


def apply_permutation(weights: FlatWeights, g: PermSpec) -> FlatWeights:
    if len(g) != weights.schema.hidden_dim:
        raise ValueError(f"permutation size {len(g)} != hidden dim {weights.schema.hidden_dim}")
    W1, W2 = unflatten(weights)
    return flatten(*_permute_structured(W1, W2, g), weights.schema)


def permutation_index(g: PermSpec, schema: ParamSchema, padded_dim: int | None = None) -> np.ndarray:
    """Gather index ``idx`` with ``(g . v) = v[idx]``; padding positions stay fixed."""
    if len(g) != schema.hidden_dim:
        raise ValueError(f"permutation size {len(g)} != hidden dim {schema.hidden_dim}")
    F, r = schema.feature_dim, schema.hidden_dim
    ids = np.arange(schema.d)
    s1, s2 = schema.layer_slices
    W1p, W2p = _permute_structured(ids[s1].reshape(F, r), ids[s2].reshape(r, F), g)
    idx = np.concatenate([W1p.reshape(-1), W2p.reshape(-1)])
    if padded_dim is not None and padded_dim > schema.d:
        idx = np.concatenate([idx, np.arange(schema.d, padded_dim)])
    return idx


def apply_permutation_flatvec(v, g: PermSpec, schema: ParamSchema) -> np.ndarray:
    """Act on a weight-shaped vector (length d, or padded length >= d)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < schema.d:
        raise ValueError(f"vector length {v.shape[-1]} shorter than d={schema.d}")
    return v[..., permutation_index(g, schema, v.shape[-1])]
