"""Two-dimensional loss slices around converged head weights, with a content-hash cache."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import store
from .downstream import as_head
from .headtrainer import HeadTrainConfig, head_loss, task_data
from .taskgen import ClassUniverse, TaskSpec
from .weightspace import FlatWeights, ParamSchema

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    Z: np.ndarray
    baseline: float
    cache_key: str

    @property
    def resolution(self) -> int:
        return self.alphas.size

    def as_dict(self) -> dict:
        return {"alphas": [float(a) for a in self.alphas], "betas": [float(b) for b in self.betas],
                "z": [[float(v) for v in row] for row in self.Z], "baseline": float(self.baseline)}


def _values(theta) -> np.ndarray:
    return np.asarray(theta.values if isinstance(theta, FlatWeights) else theta, dtype=np.float64)


def trajectory_direction(theta_init, theta_final) -> np.ndarray:
    delta = _values(theta_final) - _values(theta_init)
    norm = np.linalg.norm(delta)
    if norm == 0:
        raise ValueError("initial and final weights coincide; no trajectory direction")
    return delta / norm


def random_direction(rng: np.random.Generator, schema: ParamSchema, reference) -> np.ndarray:
    """Gaussian direction whose W1 and W2 parts match the reference's per-layer norms."""
    ref = _values(reference)
    if ref.size != schema.d:
        raise ValueError(f"reference direction has length {ref.size}, expected {schema.d}")
    out = rng.standard_normal(schema.d)
    for sl in schema.layer_slices:
        n = np.linalg.norm(out[sl])
        target = np.linalg.norm(ref[sl])
        out[sl] = out[sl] * (target / n) if n > 0 else 0.0
    return out


def grid_axis(lo: float, hi: float, resolution: int) -> np.ndarray:
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if resolution == 1:
        if lo != hi:
            raise ValueError("a single grid point needs a degenerate range")
        return np.array([float(lo)])
    axis = np.linspace(lo, hi, resolution)
    axis[np.abs(axis) < 1e-12 * max(abs(lo), abs(hi), 1.0)] = 0.0
    return axis


class TaskLoss:
    """Mean cross-entropy of a head on one task's fixed split; counts evaluations."""

    def __init__(self, task: TaskSpec, universe: ClassUniverse, config: HeadTrainConfig,
                 split: str = "test"):
        self.X, self.y = task_data(task, universe, config, split)
        self.E = universe.text_embeddings[list(task.class_ids)]
        self.schema = ParamSchema(universe.feature_dim, config.hidden_dim)
        self.activation = config.activation
        self.calls = 0
        self.tag = f"task={task.task_id};classes={list(task.class_ids)};split={split};" \
                   f"seed={config.seed};noise={config.noise_scale!r};act={config.activation}"

    def __call__(self, values) -> float:
        self.calls += 1
        head = as_head(np.asarray(values, dtype=np.float64), self.schema)
        return head_loss(head, self.X, self.y, self.E, self.activation)


def cache_key(theta, d1, d2, alpha_range, beta_range, resolution, tag: str = "") -> str:
    h = hashlib.sha256()
    for arr in (theta, d1, d2):
        a = np.ascontiguousarray(_values(arr), dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(np.asarray([*alpha_range, *beta_range], dtype="<f8").tobytes())
    h.update(str(int(resolution)).encode())
    h.update(tag.encode("utf-8"))
    return h.hexdigest()


def _load_cached(path: Path, key: str) -> LandscapeGrid | None:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
        if obj.get("cache_key") != key:
            raise ValueError("cache key mismatch")
        Z = np.asarray(obj["z"], dtype=np.float64)
        grid = LandscapeGrid(np.asarray(obj["alphas"], dtype=np.float64),
                             np.asarray(obj["betas"], dtype=np.float64), Z,
                             float(obj["baseline"]), key)
        if Z.shape != (grid.alphas.size, grid.betas.size) or not np.all(np.isfinite(Z)):
            raise ValueError("malformed grid")
        return grid
    except (OSError, ValueError, KeyError, TypeError) as exc:
        log.warning("landscape cache %s unusable (%s); recomputing", path, exc)
        return None


def compute_grid(theta_star, d1, d2, loss_fn, alpha_range=(-4.0, 4.0), beta_range=(-4.0, 4.0),
                 resolution: int = 50, cache_dir=None) -> LandscapeGrid:
    """Z[i, j] = loss(theta* + alpha_i d1 + beta_j d2); row-major, beta fastest.

    ``theta_star`` is never modified.  With ``cache_dir`` set, a grid stored
    under the same content key is returned without calling ``loss_fn``.
    """
    theta = _values(theta_star)
    u, v = _values(d1), _values(d2)
    if not (theta.shape == u.shape == v.shape):
        raise ValueError("weights and directions must share one shape")
    key = cache_key(theta, u, v, alpha_range, beta_range, resolution, getattr(loss_fn, "tag", ""))
    path = Path(cache_dir) / f"landscape-{key}.json" if cache_dir is not None else None
    if path is not None and path.exists():
        cached = _load_cached(path, key)
        if cached is not None:
            return cached
    alphas = grid_axis(*alpha_range, resolution)
    betas = grid_axis(*beta_range, resolution)
    baseline = float(loss_fn(theta.copy()))
    Z = np.empty((alphas.size, betas.size))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            if a == 0.0 and b == 0.0:
                Z[i, j] = baseline
            else:
                Z[i, j] = loss_fn(theta + a * u + b * v)
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("non-finite loss on the landscape grid")
    grid = LandscapeGrid(alphas, betas, Z, baseline, key)
    if path is not None:
        store.write_json(path, dict(grid.as_dict(), cache_key=key))
    return grid


def grid_csv(grid: LandscapeGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("alpha", "beta", "loss"))
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            w.writerow((repr(float(a)), repr(float(b)), repr(float(grid.Z[i, j]))))
    return buf.getvalue()


def grid_json(grid: LandscapeGrid) -> str:
    return json.dumps(grid.as_dict(), sort_keys=True) + "\n"


def emit_grid(grid: LandscapeGrid, path, fmt: str = "csv"):
    if fmt == "csv":
        store.write_text(path, grid_csv(grid))
    elif fmt == "json":
        store.write_text(path, grid_json(grid))
    else:
        raise ValueError(f"unknown grid format {fmt!r}")


def read_grid(path, fmt: str = "csv") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(alphas, betas, Z) parsed back from an emitted file."""
    text = Path(path).read_text(encoding="utf-8")
    if fmt == "json":
        obj = json.loads(text)
        return (np.asarray(obj["alphas"]), np.asarray(obj["betas"]), np.asarray(obj["z"]))
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != ["alpha", "beta", "loss"]:
        raise ValueError("unexpected grid CSV header")
    data = np.asarray([[float(x) for x in r] for r in rows[1:]])
    alphas = np.unique(data[:, 0])
    betas = data[:len(data) // alphas.size, 1]
    return alphas, betas, data[:, 2].reshape(alphas.size, betas.size)
