"""Synthetic task families: class universe, subtask sampling, text conditions.

The frozen image backbone is replaced by per-class unit anchors plus
Gaussian jitter; the text encoder is pluggable (hash-seeded synthetic
vectors, or vectors precomputed elsewhere and loaded from a JSON-lines file).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .seeding import derive_rng

# CIFAR-100 fine labels, used as human-readable class names.
CLASS_NAMES = (
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle",
    "bottle", "bowl", "boy", "bridge", "bus", "butterfly", "camel", "can", "castle",
    "caterpillar", "cattle", "chair", "chimpanzee", "clock", "cloud", "cockroach", "couch",
    "crab", "crocodile", "cup", "dinosaur", "dolphin", "elephant", "flatfish", "forest", "fox",
    "girl", "hamster", "house", "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion",
    "lizard", "lobster", "man", "maple_tree", "motorcycle", "mountain", "mouse", "mushroom",
    "oak_tree", "orange", "orchid", "otter", "palm_tree", "pear", "pickup_truck", "pine_tree",
    "plain", "plate", "poppy", "porcupine", "possum", "rabbit", "raccoon", "ray", "road",
    "rocket", "rose", "sea", "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake",
    "spider", "squirrel", "streetcar", "sunflower", "sweet_pepper", "table", "tank", "telephone",
    "television", "tiger", "tractor", "train", "trout", "tulip", "turtle", "wardrobe", "whale",
    "willow_tree", "wolf", "woman", "worm",
)

TEMPLATE = "A photo of "


class EmbeddingLookupError(KeyError):
    pass


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding has non-finite entries")
        object.__setattr__(self, "vector", v)


class SyntheticEmbedder:
    """Deterministic unit vectors seeded from a SHA-256 of the description."""

    source = "synthetic"

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, description: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{description}".encode("utf-8")).digest()
        words = np.frombuffer(digest, dtype="<u4").tolist()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


class FileEmbedder:
    """Lookup of precomputed vectors keyed by the exact description string."""

    source = "file"

    def __init__(self, table: Mapping[str, np.ndarray]):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.size for v in self.table.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding file mixes vector lengths {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def __call__(self, description: str) -> np.ndarray:
        try:
            return self.table[description].copy()
        except KeyError:
            raise EmbeddingLookupError(f"no embedding stored for description {description!r}") from None


def embed_text(description: str, embedder: Callable[[str], np.ndarray]) -> TextEmbedding:
    return TextEmbedding(embedder(description), getattr(embedder, "source", "synthetic"))


def describe_class(name: str) -> str:
    return TEMPLATE + name.replace("_", " ")


@dataclass(frozen=True)
class ClassUniverse:
    names: tuple
    anchors: np.ndarray
    text_embeddings: np.ndarray

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        for label, m in (("anchors", self.anchors), ("text embeddings", self.text_embeddings)):
            if m.shape[0] != len(self.names):
                raise ValueError(f"{label} must have one row per class")
            if not np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-12):
                raise ValueError(f"{label} must have unit L2 norm")

    def __len__(self):
        return len(self.names)

    @property
    def feature_dim(self) -> int:
        return self.anchors.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.text_embeddings.shape[1]


def make_anchors(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((dim, n) if n <= dim else (n, dim))
    if n <= dim:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return np.ascontiguousarray(q.T)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def make_universe(n_classes: int, feature_dim: int, embed_dim: int | None = None,
                  alignment: float = 0.5, seed: int = 0, embedder=None,
                  names=None) -> ClassUniverse:
    embed_dim = feature_dim if embed_dim is None else embed_dim
    if names is None:
        if n_classes > len(CLASS_NAMES):
            names = tuple(f"class_{i:03d}" for i in range(n_classes))
        else:
            names = CLASS_NAMES[:n_classes]
    names = tuple(names)
    if len(names) != n_classes:
        raise ValueError("need exactly one name per class")
    if not 0.0 <= alignment <= 1.0:
        raise ValueError("alignment must lie in [0, 1]")
    anchors = make_anchors(n_classes, feature_dim, derive_rng(seed, "anchors"))
    embedder = embedder or SyntheticEmbedder(embed_dim, seed)
    raw = np.stack([embedder(describe_class(n)) for n in names])
    if raw.shape[1] != embed_dim:
        raise ValueError(f"embedder returns {raw.shape[1]}-d vectors, expected {embed_dim}")
    raw = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    if alignment > 0:
        if embed_dim != feature_dim:
            raise ValueError("anchor alignment needs embed_dim == feature_dim")
        raw = alignment * anchors + (1.0 - alignment) * raw
        raw = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return ClassUniverse(names, anchors, raw)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: tuple
    descriptions: tuple = ()

    @property
    def k(self) -> int:
        return len(self.class_ids)


def template_descriptions(task: TaskSpec, universe: ClassUniverse) -> list[str]:
    return [describe_class(universe.names[c]) for c in task.class_ids]


def make_task(task_id: int, class_ids, universe: ClassUniverse) -> TaskSpec:
    ids = tuple(int(c) for c in class_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("task class ids must be distinct")
    if any(c < 0 or c >= len(universe) for c in ids):
        raise ValueError("class id outside the universe")
    return TaskSpec(task_id, ids, tuple(describe_class(universe.names[c]) for c in ids))


def sample_task(rng: np.random.Generator, universe: ClassUniverse, k_min: int, k_max: int,
                task_id: int = 0) -> TaskSpec:
    if not 1 <= k_min <= k_max:
        raise ValueError("need 1 <= k_min <= k_max")
    if k_max > len(universe):
        raise ValueError(f"k_max={k_max} exceeds universe size {len(universe)}")
    k = int(rng.integers(k_min, k_max + 1))
    ids = rng.choice(len(universe), size=k, replace=False)
    return make_task(task_id, ids, universe)


def fusion_weights(E: np.ndarray) -> np.ndarray:
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    if E.shape[0] < 1:
        raise ValueError("need at least one embedding row")
    norms = np.linalg.norm(E, axis=1)
    mu = E.mean(axis=0)
    mu_norm = np.linalg.norm(mu)
    if np.any(norms == 0) or mu_norm == 0:
        raise ValueError("degenerate embeddings: zero-norm row or zero-norm mean")
    sims = (E / norms[:, None]) @ (mu / mu_norm)
    w = np.exp(sims - sims.max())
    return w / w.sum()


def fuse_features(E: np.ndarray) -> np.ndarray:
    """Softmax(cosine-to-mean)-weighted sum of the un-normalized rows."""
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    return fusion_weights(E) @ E


def task_condition(task: TaskSpec, universe: ClassUniverse) -> TextEmbedding:
    return TextEmbedding(fuse_features(universe.text_embeddings[list(task.class_ids)]))


def synth_features(class_id: int, rng: np.random.Generator, universe: ClassUniverse,
                   noise_scale: float, n: int | None = None) -> np.ndarray:
    """Anchor plus isotropic jitter, L2-normalized (one vector, or ``n`` rows)."""
    anchor = universe.anchors[class_id]
    shape = anchor.shape if n is None else (n, anchor.size)
    x = anchor + noise_scale * rng.standard_normal(shape) if noise_scale else np.broadcast_to(anchor, shape).copy()
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_samples(class_ids, per_class: int, rng: np.random.Generator, universe: ClassUniverse,
                  noise_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Features and task-local labels (0..k-1) for ``per_class`` draws of each class."""
    X = np.concatenate([synth_features(c, rng, universe, noise_scale, per_class) for c in class_ids])
    y = np.repeat(np.arange(len(class_ids)), per_class)
    return X, y
