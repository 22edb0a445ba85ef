"""Applications of generated head weights: evaluation, initialization, fusion, enhancement."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .headtrainer import (GELU_A, GELU_C, INIT_FORMULAS, INIT_METHODS, HeadTrainConfig,
                          HeadWeights, ProjectionHead, head_loss, init_head, task_data,
                          train_head)
from .seeding import derive_rng
from .taskgen import (ClassUniverse, TaskSpec, fuse_features, make_task, synth_samples,
                      task_condition)
from .weightspace import FlatWeights, ParamSchema, PermSpec, apply_permutation, unflatten

FUSION_METHODS = ("text-fusion", "interpolation", "perm-aligned-interpolation")


@dataclass(frozen=True)
class EvalConfig:
    test_samples_per_class: int = 16
    tau: float = 0.0
    tau_test: float = 0.0

    def __post_init__(self):
        if self.test_samples_per_class < 1:
            raise ValueError("need at least one test sample per class")
        for t in (self.tau, self.tau_test):
            if not 0.0 <= t <= 1.0:
                raise ValueError("thresholds must lie in [0, 1]")


@dataclass(frozen=True)
class FusionResult:
    method: str
    accuracy_a: float
    accuracy_b: float

    @property
    def average(self) -> float:
        return 0.5 * (self.accuracy_a + self.accuracy_b)


def as_head(weights, schema: ParamSchema | None = None) -> HeadWeights:
    if isinstance(weights, HeadWeights):
        return weights
    if isinstance(weights, FlatWeights):
        return HeadWeights(*unflatten(weights))
    if schema is None:
        raise ValueError("a schema is needed to interpret a raw weight vector")
    return HeadWeights(*unflatten(FlatWeights(schema, np.asarray(weights, dtype=np.float64))))


def predict_labels(head: HeadWeights, X, class_embeddings, activation="gelu") -> np.ndarray:
    """Argmax over dot-product logits, ties to the lowest index.

    A sample whose projection is exactly zero scores 0 against every class
    and therefore predicts class 0; generated weights can hit this, and
    evaluation must not abort on it.
    """
    X = np.asarray(X, dtype=np.float64)
    pre = X @ head.W1
    if activation == "gelu":
        pre = 0.5 * pre * (1.0 + np.tanh(GELU_C * (pre + GELU_A * pre * pre * pre)))
    h = pre @ head.W2
    n = np.linalg.norm(h, axis=1, keepdims=True)
    h = np.divide(h, n, out=np.zeros_like(h), where=n > 0)
    return np.argmax(h @ np.asarray(class_embeddings).T, axis=1)


def _test_split(task: TaskSpec, universe: ClassUniverse, config: HeadTrainConfig,
                eval_config: EvalConfig | None):
    if eval_config is not None and eval_config.test_samples_per_class != config.test_samples_per_class:
        config = replace(config, test_samples_per_class=eval_config.test_samples_per_class)
    return task_data(task, universe, config, "test")


def evaluate(weights, task: TaskSpec, universe: ClassUniverse, config: HeadTrainConfig,
             target=None, eval_config: EvalConfig | None = None):
    """(test accuracy, weight MSE against ``target`` or None)."""
    schema = ParamSchema(universe.feature_dim, config.hidden_dim)
    head = as_head(weights, schema)
    X, y = _test_split(task, universe, config, eval_config)
    E = universe.text_embeddings[list(task.class_ids)]
    acc = float(np.mean(predict_labels(head, X, E, config.activation) == y))
    mse = None
    if target is not None:
        diff = head.flat().values - as_head(target, schema).flat().values
        mse = float(np.mean(diff * diff))
    return acc, mse


def meets_thresholds(accuracy: float, eval_config: EvalConfig, seen: bool) -> bool:
    return accuracy >= (eval_config.tau if seen else eval_config.tau_test)


# -- initialization comparison ---------------------------------------------

def init_compare(task: TaskSpec, universe: ClassUniverse, methods, config: HeadTrainConfig,
                 model=None, epochs: int = 50, learning_rate: float = 3e-4, random_state: int = 0):
    """Train one head per initialization under identical settings.

    Returns rows of ``{"method", "formula", "test_loss", "accuracy"}``.
    ``t2w`` draws the starting weights from ``model.sample`` given the
    task's fused text condition.
    """
    rows = []
    schema = ParamSchema(universe.feature_dim, config.hidden_dim)
    E = universe.text_embeddings[list(task.class_ids)]
    Xt, yt = _test_split(task, universe, config, None)
    for i, method in enumerate(methods):
        if method == "t2w":
            if model is None:
                raise ValueError("the t2w initialization needs a trained diffusion model")
            cond = task_condition(task, universe).vector[None, :]
            start = as_head(model.sample(cond, random_state=random_state)[0], schema)
            formula = "sampled from the text-conditioned diffusion model"
        elif method in INIT_METHODS:
            start = init_head(method, schema, derive_rng(random_state, "init-compare", i))
            formula = INIT_FORMULAS[method]
        else:
            raise ValueError(f"unknown initialization method {method!r}")
        head, _ = train_head(task, universe, start, config, epochs=epochs, schedule="cosine",
                             learning_rate=learning_rate)
        head = head.rounded()
        rows.append({"method": method, "formula": formula,
                     "test_loss": head_loss(head, Xt, yt, E, config.activation),
                     "accuracy": float(np.mean(predict_labels(head, Xt, E, config.activation) == yt))})
    return rows


# -- fusion ----------------------------------------------------------------

def union_task(task_a: TaskSpec, task_b: TaskSpec, universe: ClassUniverse,
               allow_overlap: bool = False) -> TaskSpec:
    overlap = set(task_a.class_ids) & set(task_b.class_ids)
    if overlap and not allow_overlap:
        raise ValueError(f"fusion tasks share classes {sorted(overlap)}")
    ids = list(task_a.class_ids) + [c for c in task_b.class_ids if c not in task_a.class_ids]
    return make_task(task_a.task_id, ids, universe)


def union_accuracies(weights, task_a: TaskSpec, task_b: TaskSpec, universe: ClassUniverse,
                     config: HeadTrainConfig, allow_overlap: bool = False) -> tuple[float, float]:
    """Accuracy on each task's test split, classifying over the union label set."""
    union = union_task(task_a, task_b, universe, allow_overlap)
    head = as_head(weights, ParamSchema(universe.feature_dim, config.hidden_dim))
    E = universe.text_embeddings[list(union.class_ids)]
    position = {c: i for i, c in enumerate(union.class_ids)}
    accs = []
    for task in (task_a, task_b):
        X, y = _test_split(task, universe, config, None)
        y_union = np.asarray([position[task.class_ids[j]] for j in y])
        accs.append(float(np.mean(predict_labels(head, X, E, config.activation) == y_union)))
    return accs[0], accs[1]


def fused_condition(task_a: TaskSpec, task_b: TaskSpec, universe: ClassUniverse,
                    allow_overlap: bool = False) -> np.ndarray:
    union = union_task(task_a, task_b, universe, allow_overlap)
    return fuse_features(universe.text_embeddings[list(union.class_ids)])


def fuse_by_text(task_a: TaskSpec, task_b: TaskSpec, universe: ClassUniverse, model,
                 config: HeadTrainConfig, random_state: int = 0,
                 allow_overlap: bool = False) -> FusionResult:
    cond = fused_condition(task_a, task_b, universe, allow_overlap)
    w = model.sample(cond[None, :], random_state=random_state)[0]
    return FusionResult("text-fusion", *union_accuracies(w, task_a, task_b, universe, config,
                                                           allow_overlap))


def fuse_interpolate(theta_a: FlatWeights, theta_b: FlatWeights) -> FlatWeights:
    if theta_a.schema != theta_b.schema:
        raise ValueError("cannot interpolate weights of different schemas")
    return FlatWeights(theta_a.schema, 0.5 * theta_a.values + 0.5 * theta_b.values)


def _signatures(theta: FlatWeights) -> np.ndarray:
    W1, W2 = unflatten(theta)
    return np.concatenate([W1.T, W2], axis=1)


def _alignment_score(sa, sb, g: PermSpec) -> float:
    # unit j of B lands at position g[j]
    return float(sum(sa[g.permutation[j]] @ sb[j] for j in range(len(g))))


def permutation_align(theta_a: FlatWeights, theta_b: FlatWeights):
    """Permutation of B's hidden units maximizing summed signature correlation with A.

    Returns ``(g, g . theta_b)``.  Solved exactly as a linear assignment.
    """
    if theta_a.schema != theta_b.schema:
        raise ValueError("cannot align weights of different schemas")
    sa, sb = _signatures(theta_a), _signatures(theta_b)
    rows, cols = linear_sum_assignment(sa @ sb.T, maximize=True)
    g = np.empty(len(rows), dtype=np.int64)
    g[cols] = rows
    perm = PermSpec(g)
    return perm, apply_permutation(theta_b, perm)


def permutation_align_bruteforce(theta_a: FlatWeights, theta_b: FlatWeights, max_r: int = 8):
    r = theta_a.schema.hidden_dim
    if r > max_r:
        raise ValueError(f"exhaustive alignment over {r}! permutations refused (max r={max_r})")
    sa, sb = _signatures(theta_a), _signatures(theta_b)
    best, best_score = None, -np.inf
    for p in itertools.permutations(range(r)):
        g = PermSpec(np.asarray(p))
        score = _alignment_score(sa, sb, g)
        if score > best_score:
            best, best_score = g, score
    return best, apply_permutation(theta_b, best)


def alignment_score(theta_a: FlatWeights, theta_b: FlatWeights, g: PermSpec) -> float:
    return _alignment_score(_signatures(theta_a), _signatures(theta_b), g)


def fusion_baselines(task_a: TaskSpec, task_b: TaskSpec, universe: ClassUniverse,
                     head_a: HeadWeights, head_b: HeadWeights, config: HeadTrainConfig):
    """Plain and permutation-aligned midpoint fusion of two trained heads."""
    ta, tb = head_a.flat(), head_b.flat()
    plain = fuse_interpolate(ta, tb)
    _, aligned_b = permutation_align(ta, tb)
    aligned = fuse_interpolate(ta, aligned_b)
    return [FusionResult("interpolation", *union_accuracies(plain, task_a, task_b, universe, config)),
            FusionResult("perm-aligned-interpolation",
                         *union_accuracies(aligned, task_a, task_b, universe, config))]


def independent_head(task: TaskSpec, universe: ClassUniverse, config: HeadTrainConfig) -> HeadWeights:
    """Head trained from its own Xavier-uniform start (no shared base)."""
    head, _ = train_head(task, universe, None, config)
    return head


# -- enhancement -----------------------------------------------------------

def enhance(task: TaskSpec, universe: ClassUniverse, model, config: HeadTrainConfig,
            fraction: float = 0.5, from_step: int | None = None, random_state: int = 0):
    """(accuracy before, accuracy after) partially denoising an under-trained head."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction of training must lie in (0, 1]")
    epochs = max(1, int(round(fraction * config.epochs_subtask)))
    head, _ = train_head(task, universe, None, config, epochs=epochs)
    head = head.rounded()
    before, _ = evaluate(head, task, universe, config)
    cond = task_condition(task, universe).vector[None, :]
    improved = model.enhance(head.flat().values[None, :], cond, from_step=from_step,
                             random_state=random_state)[0]
    after, _ = evaluate(improved, task, universe, config)
    return before, after


# -- universal baseline ----------------------------------------------------

def universal_baseline(universe: ClassUniverse, config: HeadTrainConfig) -> HeadWeights:
    """One head trained jointly on every class; score a subtask with :func:`evaluate`."""
    X, y = synth_samples(range(len(universe)), config.samples_per_class,
                         derive_rng(config.seed, "universal-data"), universe, config.noise_scale)
    est = ProjectionHead(config.hidden_dim, config.activation, config.learning_rate,
                         config.epochs_subtask, config.batch_size, init="xavier-uniform",
                         random_state=int(derive_rng(config.seed, "universal").integers(2 ** 63)))
    est.fit(X, y, class_embeddings=universe.text_embeddings)
    return est.weights_


# -- reports ---------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def markdown_table(rows, columns) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r[c]) for c in columns) + " |")
    return "\n".join(lines) + "\n"


def csv_table(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def fusion_rows(pair_results) -> list[dict]:
    """Flatten ``[(pair_label, [FusionResult, ...]), ...]`` into report rows."""
    rows = []
    for label, results in pair_results:
        for res in results:
            rows.append({"pair": label, "method": res.method, "acc_a": res.accuracy_a,
                         "acc_b": res.accuracy_b, "average": res.average})
    return rows


FUSION_COLUMNS = ("pair", "method", "acc_a", "acc_b", "average")
INIT_COLUMNS = ("method", "formula", "test_loss", "accuracy")
