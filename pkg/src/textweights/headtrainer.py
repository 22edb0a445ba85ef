"""Two-layer projection heads: forward pass, training, and the paired corpus.

A head maps a backbone feature ``x`` to ``normalize(act(x W1) W2)`` and
scores class ``i`` by the dot product with its text embedding.  Stage 1
trains one shared base on every class; stage 2 fine-tunes a copy of it per
subtask.  The resulting (condition, weights) pairs form the training corpus
of the weight generator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import gradcore
from .gradcore import GELU_A, GELU_C
from .seeding import derive_rng
from .store import WeightDataset, WeightRecord
from .taskgen import (ClassUniverse, TaskSpec, sample_task, synth_samples,
                      task_condition)
from .weightspace import FlatWeights, ParamSchema, chunk_spec, chunk_spec_for_count, flatten, unflatten

INIT_METHODS = ("xavier-uniform", "xavier-normal", "kaiming-uniform", "kaiming-normal",
                "uniform", "normal")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class HeadWeights:
    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        for m in (self.W1, self.W2):
            if not np.all(np.isfinite(m)):
                raise ValueError("head weights contain non-finite entries")
        if self.W1.shape[::-1] != self.W2.shape:
            raise ValueError(f"W1 {self.W1.shape} and W2 {self.W2.shape} do not match")

    @property
    def schema(self) -> ParamSchema:
        return ParamSchema(*self.W1.shape)

    def flat(self) -> FlatWeights:
        return flatten(self.W1, self.W2, self.schema)

    @classmethod
    def from_flat(cls, flat: FlatWeights) -> "HeadWeights":
        return cls(*unflatten(flat))

    def rounded(self) -> "HeadWeights":
        """Copy rounded through float32, the on-disk precision."""
        return HeadWeights(self.W1.astype(np.float32).astype(np.float64),
                           self.W2.astype(np.float32).astype(np.float64))


@dataclass
class HeadTrainConfig:
    hidden_dim: int = 4
    epochs_base: int = 1
    epochs_subtask: int = 32
    learning_rate: float = 3e-4
    batch_size: int = 32
    samples_per_class: int = 64
    test_samples_per_class: int = 16
    base_samples_per_class: int = 64
    activation: str = "gelu"
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden_dim, self.batch_size, self.samples_per_class,
               self.test_samples_per_class, self.base_samples_per_class) < 1:
            raise ValueError("head-training counts must be positive")
        if self.epochs_base < 0 or self.epochs_subtask < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and the learning rate positive")
        if self.activation not in ("gelu", "none"):
            raise ValueError("activation must be 'gelu' or 'none'")


def _act(x, activation):
    if activation == "gelu":
        return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))
    if activation == "none":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def head_forward(x, head: HeadWeights, activation: str = "gelu") -> np.ndarray:
    """Projected, L2-normalized feature(s); accepts one vector or a row batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.W1.shape[0]:
        raise ValueError(f"feature length {x.shape[-1]} != F={head.W1.shape[0]}")
    h = _act(x @ head.W1, activation) @ head.W2
    n = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm projection cannot be normalized")
    return h / n


def logits(h_proj, class_embeddings) -> np.ndarray:
    E = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    h_proj = np.asarray(h_proj, dtype=np.float64)
    if h_proj.shape[-1] != E.shape[1]:
        raise ValueError(f"projection dim {h_proj.shape[-1]} != embedding dim {E.shape[1]}")
    return h_proj @ E.T


def init_head(method: str, schema: ParamSchema, rng: np.random.Generator) -> HeadWeights:
    F, r = schema.feature_dim, schema.hidden_dim
    mats = []
    for fan_in, fan_out in ((F, r), (r, F)):
        shape = (fan_in, fan_out)
        if method == "xavier-uniform":
            b = math.sqrt(6.0 / (fan_in + fan_out))
            mats.append(rng.uniform(-b, b, shape))
        elif method == "xavier-normal":
            mats.append(rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), shape))
        elif method == "kaiming-uniform":
            b = math.sqrt(6.0 / fan_in)
            mats.append(rng.uniform(-b, b, shape))
        elif method == "kaiming-normal":
            mats.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape))
        elif method == "uniform":
            mats.append(rng.uniform(-0.1, 0.1, shape))
        elif method == "normal":
            mats.append(rng.normal(0.0, 0.01, shape))
        else:
            raise ValueError(f"unknown initialization {method!r}")
    return HeadWeights(*mats)


INIT_FORMULAS = {
    "xavier-uniform": "U(-b, b), b = sqrt(6 / (fan_in + fan_out))",
    "xavier-normal": "N(0, 2 / (fan_in + fan_out))",
    "kaiming-uniform": "U(-b, b), b = sqrt(6 / fan_in)",
    "kaiming-normal": "N(0, 2 / fan_in)",
    "uniform": "U(-0.1, 0.1)",
    "normal": "N(0, 0.01^2)",
}


def build_head_graph(activation: str) -> gradcore.Graph:
    g = gradcore.Graph()
    x, w1, w2, et = g.input("X"), g.input("W1"), g.input("W2"), g.input("ET")
    h = g.normalize_rows(g.matmul(g.activation(g.matmul(x, w1), activation), w2), name="h_proj")
    z = g.matmul(h, et, name="logits")
    g.cross_entropy_loss(z, np.zeros(0, dtype=np.int64), name="loss")
    return g


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int = 0) -> float:
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class ProjectionHead(ClassifierMixin, BaseEstimator):
    """Trainable two-layer projection head scored against fixed class embeddings.

    ``fit(X, y, class_embeddings=E)`` trains on features ``X`` with labels
    ``y`` indexing rows of ``E``; ``predict`` returns the argmax row index
    (ties go to the lowest index).
    """

    def __init__(self, hidden_dim=4, activation="gelu", learning_rate=3e-4, epochs=32,
                 batch_size=32, schedule="constant", init="xavier-uniform", random_state=0):
        self.hidden_dim = hidden_dim
        self.activation = activation
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.schedule = schedule
        self.init = init
        self.random_state = random_state

    def fit(self, X, y, class_embeddings=None, init_weights: HeadWeights | None = None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if class_embeddings is None:
            raise ValueError("class_embeddings are required")
        E = check_array(class_embeddings, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if y.min() < 0 or y.max() >= E.shape[0]:
            raise ValueError("labels must index rows of class_embeddings")
        rng = np.random.Generator(np.random.PCG64(self.random_state))
        schema = ParamSchema(X.shape[1], self.hidden_dim)
        head = init_weights if init_weights is not None else init_head(self.init, schema, rng)
        params = {"W1": head.W1.copy(), "W2": head.W2.copy()}
        graph = build_head_graph(self.activation)
        loss_node = graph.nodes[-1]
        opt = gradcore.Adam(params, lr=self.learning_rate)
        n = X.shape[0]
        steps_per_epoch = math.ceil(n / self.batch_size)
        total = steps_per_epoch * self.epochs
        self.loss_curve_ = []
        step = 0
        feed = {"ET": np.ascontiguousarray(E.T)}
        for _ in range(self.epochs):
            order = rng.permutation(n)
            running = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * self.batch_size:(b + 1) * self.batch_size]
                graph.set_attr(loss_node, targets=y[idx])
                feed.update(X=X[idx], W1=params["W1"], W2=params["W2"])
                try:
                    grads = graph.gradient(feed, ["W1", "W2"])
                except gradcore.GraphError as exc:
                    raise TrainingDivergedError(f"head training failed at step {step}: {exc}") from exc
                loss = float(loss_node.value[0, 0])
                running += loss * idx.size
                lr = (cosine_lr(self.learning_rate, step, total) if self.schedule == "cosine"
                      else self.learning_rate)
                opt.step(params, grads, lr)
                step += 1
            self.loss_curve_.append(running / n)
        self.weights_ = HeadWeights(params["W1"], params["W2"])
        self.class_embeddings_ = E
        self.classes_ = np.arange(E.shape[0])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        return logits(head_forward(X, self.weights_, self.activation), self.class_embeddings_)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


def head_accuracy(head: HeadWeights, X, y, class_embeddings, activation="gelu") -> float:
    z = logits(head_forward(X, head, activation), class_embeddings)
    return float(np.mean(np.argmax(z, axis=1) == y)) if len(y) else 0.0


def head_loss(head: HeadWeights, X, y, class_embeddings, activation="gelu") -> float:
    """Mean cross-entropy, reduced in a fixed order."""
    z = logits(head_forward(X, head, activation), class_embeddings)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def task_data(task: TaskSpec, universe: ClassUniverse, config: HeadTrainConfig, split: str,
              class_ids=None):
    """Seeded synthetic samples for one task; the stream depends only on (seed, task id)."""
    ids = task.class_ids if class_ids is None else class_ids
    if split == "train":
        rng = derive_rng(config.seed, "head-train", task.task_id)
        per = config.samples_per_class
    elif split == "test":
        rng = derive_rng(config.seed, "head-test", task.task_id)
        per = config.test_samples_per_class
    else:
        raise ValueError(f"unknown split {split!r}")
    return synth_samples(ids, per, rng, universe, config.noise_scale)


def train_head(task: TaskSpec, universe: ClassUniverse, base: HeadWeights | None,
               config: HeadTrainConfig, epochs: int | None = None, init: str = "xavier-uniform",
               schedule: str = "constant", learning_rate: float | None = None):
    """Fine-tune ``base`` (or a fresh init) on one task; returns (weights, metrics)."""
    epochs = config.epochs_subtask if epochs is None else epochs
    E = universe.text_embeddings[list(task.class_ids)]
    X, y = task_data(task, universe, config, "train")
    Xt, yt = task_data(task, universe, config, "test")
    if base is None:
        base = init_head(init, ParamSchema(universe.feature_dim, config.hidden_dim),
                         derive_rng(config.seed, "head-init", task.task_id))
    if epochs == 0:
        head, curve = base, []
    else:
        est = ProjectionHead(config.hidden_dim, config.activation,
                             learning_rate or config.learning_rate, epochs, config.batch_size,
                             schedule, random_state=int(derive_rng(config.seed, "head-shuffle",
                                                                   task.task_id).integers(2 ** 63)))
        est.fit(X, y, class_embeddings=E, init_weights=base)
        head, curve = est.weights_, est.loss_curve_
        if not np.isfinite(curve[-1]):
            raise TrainingDivergedError(f"task {task.task_id}: non-finite loss")
    stored = head.rounded()
    metrics = {
        "train_accuracy": head_accuracy(stored, X, y, E, config.activation),
        "test_accuracy": head_accuracy(stored, Xt, yt, E, config.activation),
        "test_loss": head_loss(stored, Xt, yt, E, config.activation),
        "loss_curve": curve,
    }
    return head, metrics


def train_base(universe: ClassUniverse, config: HeadTrainConfig) -> HeadWeights:
    """Stage 1: one shared head trained on every class of the universe."""
    rng = derive_rng(config.seed, "base-data")
    X, y = synth_samples(range(len(universe)), config.base_samples_per_class, rng, universe,
                         config.noise_scale)
    init = init_head("xavier-uniform", ParamSchema(universe.feature_dim, config.hidden_dim),
                     derive_rng(config.seed, "base-init"))
    if config.epochs_base == 0:
        return init
    est = ProjectionHead(config.hidden_dim, config.activation, config.learning_rate,
                         config.epochs_base, config.batch_size,
                         random_state=int(derive_rng(config.seed, "base-shuffle").integers(2 ** 63)))
    est.fit(X, y, class_embeddings=universe.text_embeddings, init_weights=init)
    return est.weights_


def sample_distinct_tasks(universe: ClassUniverse, n_tasks: int, k_min: int, k_max: int,
                          seed: int, max_tries: int | None = None) -> list[TaskSpec]:
    rng = derive_rng(seed, "tasks")
    seen, tasks = set(), []
    budget = max_tries if max_tries is not None else 100 * n_tasks + 100
    for _ in range(budget):
        if len(tasks) == n_tasks:
            break
        t = sample_task(rng, universe, k_min, k_max, task_id=len(tasks))
        key = frozenset(t.class_ids)
        if key in seen:
            continue
        seen.add(key)
        tasks.append(t)
    if len(tasks) < n_tasks:
        raise RuntimeError(f"could only generate {len(tasks)} distinct tasks of {n_tasks}")
    return tasks


def _train_record(task, universe, base, config) -> WeightRecord:
    head, m = train_head(task, universe, base, config)
    return WeightRecord(task.task_id, task.class_ids, task_condition(task, universe).vector,
                        head.rounded().flat().values, m["train_accuracy"], m["test_accuracy"])


@dataclass
class DatasetBuild:
    seen: WeightDataset
    unseen: WeightDataset
    base: HeadWeights
    tasks: list = field(default_factory=list)


def build_dataset(universe: ClassUniverse, n_tasks: int, split_fraction: float,
                  config: HeadTrainConfig, k_min: int, k_max: int, block_size: int,
                  n_jobs: int = 1, block_count: int | None = None) -> DatasetBuild:
    """Sample distinct tasks, fine-tune each from the shared base, split by task."""
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    tasks = sample_distinct_tasks(universe, n_tasks, k_min, k_max, config.seed)
    base = train_base(universe, config)
    if n_jobs == 1:
        records = [_train_record(t, universe, base, config) for t in tasks]
    else:
        from joblib import Parallel, delayed
        records = Parallel(n_jobs=n_jobs)(delayed(_train_record)(t, universe, base, config)
                                          for t in tasks)
    order = derive_rng(config.seed, "split").permutation(n_tasks)
    n_seen = int(round(n_tasks * split_fraction))
    seen_ids, unseen_ids = sorted(order[:n_seen]), sorted(order[n_seen:])
    schema = ParamSchema(universe.feature_dim, config.hidden_dim)
    seen_records = [records[i] for i in seen_ids]
    if block_count is None:
        spec = chunk_spec(schema.d, block_size)
    else:
        spec = chunk_spec_for_count(schema.d, block_count)
        if spec.block_size != block_size:
            raise ValueError(f"{block_count} blocks of d={schema.d} need block size "
                             f"{spec.block_size}, not {block_size}")
    spec = WeightDataset.global_stats(seen_records, spec)
    meta = {"seed": config.seed, "universe": {"classes": len(universe),
                                              "feature_dim": universe.feature_dim,
                                              "embed_dim": universe.embed_dim}}
    seen = WeightDataset(schema, universe.embed_dim, spec, seen_records, dict(meta, split="seen"))
    unseen = WeightDataset(schema, universe.embed_dim, spec, [records[i] for i in unseen_ids],
                           dict(meta, split="unseen"))
    return DatasetBuild(seen, unseen, base, tasks)


def with_epochs(config: HeadTrainConfig, epochs: int) -> HeadTrainConfig:
    return replace(config, epochs_subtask=epochs)
