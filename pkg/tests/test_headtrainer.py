import math

import numpy as np
import pytest

from textweights import gradcore
from textweights.headtrainer import (INIT_METHODS, HeadTrainConfig, HeadWeights, ProjectionHead,
                                     build_dataset, build_head_graph, head_accuracy,
                                     head_forward, init_head, logits, train_base, train_head)
from textweights.store import dataset_bytes
from textweights.taskgen import make_task, make_universe, synth_samples
from textweights.weightspace import ParamSchema, apply_permutation, sample_permutation


@pytest.fixture(scope="module")
def small_universe():
    return make_universe(12, 8, 8, alignment=0.5, seed=1)


def _gelu_scalar(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def test_zero_head_rejected():
    head = HeadWeights(np.zeros((3, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        head_forward(np.ones(3), head, "gelu")


def test_identity_composition_returns_unit_input():
    x = np.array([3.0, -4.0, 0.0])
    head = HeadWeights(np.eye(3), np.eye(3))
    np.testing.assert_allclose(head_forward(x, head, "none"), x / 5.0, atol=1e-15)


def test_head_forward_matches_straight_line():
    rng = np.random.default_rng(4)
    F, r = 5, 3
    W1, W2 = rng.standard_normal((F, r)), rng.standard_normal((r, F))
    x = rng.standard_normal(F)
    hidden = [_gelu_scalar(sum(x[i] * W1[i, j] for i in range(F))) for j in range(r)]
    out = [sum(hidden[j] * W2[j, c] for j in range(r)) for c in range(F)]
    n = math.sqrt(sum(v * v for v in out))
    np.testing.assert_allclose(head_forward(x, HeadWeights(W1, W2), "gelu"),
                               [v / n for v in out], atol=1e-12)


def test_head_forward_shape_mismatch():
    with pytest.raises(ValueError):
        head_forward(np.ones(4), HeadWeights(np.ones((3, 2)), np.ones((2, 3))))


def test_logits_orthogonal_and_argmax():
    E = np.eye(4)[:3]
    np.testing.assert_array_equal(logits(np.array([0, 0, 0, 1.0]), E), np.zeros(3))
    assert np.argmax(logits(E[2], E)) == 2
    with pytest.raises(ValueError):
        logits(np.ones(3), E)


def test_logits_agree_with_graph_evaluation():
    rng = np.random.default_rng(5)
    F, r, k = 6, 3, 4
    W1, W2 = rng.standard_normal((F, r)), rng.standard_normal((r, F))
    X, E = rng.standard_normal((7, F)), rng.standard_normal((k, F))
    g = build_head_graph("gelu")
    node = next(n for n in g.nodes if n.name == "logits")
    out = g.evaluate({"X": X, "W1": W1, "W2": W2, "ET": E.T}, output=node)
    np.testing.assert_allclose(out, logits(head_forward(X, HeadWeights(W1, W2)), E), atol=1e-12)


def test_init_methods_all_produce_valid_heads():
    s = ParamSchema(8, 4)
    for m in INIT_METHODS:
        h = init_head(m, s, np.random.default_rng(0))
        assert h.W1.shape == (8, 4) and h.W2.shape == (4, 8)
    with pytest.raises(ValueError):
        init_head("orthogonal", s, np.random.default_rng(0))


@pytest.mark.parametrize("ids", [(2, 7), (0, 1), (3, 9)])
def test_noiseless_two_class_task_is_learned(small_universe, ids):
    # from a random init; 4 steps per epoch needs a larger step than the default
    cfg = HeadTrainConfig(noise_scale=0.0, learning_rate=3e-3)
    _, m = train_head(make_task(0, ids, small_universe), small_universe, None, cfg, epochs=32)
    assert m["test_accuracy"] == 1.0


def test_noiseless_loss_is_non_increasing(small_universe):
    cfg = HeadTrainConfig(noise_scale=0.0)
    task = make_task(0, [0, 3, 5, 9], small_universe)
    _, m = train_head(task, small_universe, None, cfg, epochs=20)
    curve = m["loss_curve"]
    for a, b in zip(curve, curve[1:]):
        assert b <= a * 1.05


def test_zero_epochs_returns_base(small_universe):
    cfg = HeadTrainConfig()
    base = init_head("xavier-uniform", ParamSchema(8, 4), np.random.default_rng(3))
    head, _ = train_head(make_task(0, [1, 2], small_universe), small_universe, base, cfg, epochs=0)
    assert head is base


def test_train_head_deterministic(small_universe):
    cfg = HeadTrainConfig(epochs_subtask=3)
    task = make_task(5, [1, 4, 6], small_universe)
    a, _ = train_head(task, small_universe, None, cfg)
    b, _ = train_head(task, small_universe, None, cfg)
    assert a.W1.tobytes() == b.W1.tobytes() and a.W2.tobytes() == b.W2.tobytes()


def test_train_base_beats_chance_and_moves(small_universe):
    cfg = HeadTrainConfig(epochs_base=3, learning_rate=1e-3)
    base = train_base(small_universe, cfg)
    again = train_base(small_universe, cfg)
    assert np.array_equal(base.W1, again.W1)
    init = train_base(small_universe, HeadTrainConfig(epochs_base=0))
    assert np.linalg.norm(base.W1 - init.W1) > 0
    X, y = synth_samples(range(12), 32, np.random.default_rng(9), small_universe, 0.1)
    assert head_accuracy(base, X, y, small_universe.text_embeddings) > 1 / 12


def test_permuted_head_keeps_accuracy(small_universe):
    cfg = HeadTrainConfig(epochs_subtask=5)
    task = make_task(1, [0, 1, 2, 3, 4], small_universe)
    head, _ = train_head(task, small_universe, None, cfg)
    X, y = synth_samples(task.class_ids, 20, np.random.default_rng(2), small_universe, 0.1)
    E = small_universe.text_embeddings[list(task.class_ids)]
    labels = np.repeat(np.arange(5), 20)
    flat = head.flat()
    for seed in range(5):
        g = sample_permutation(np.random.default_rng(seed), 4)
        moved = HeadWeights.from_flat(apply_permutation(flat, g))
        assert head_accuracy(moved, X, labels, E) == head_accuracy(head, X, labels, E)


def test_projection_head_estimator_api():
    rng = np.random.default_rng(0)
    E = np.eye(4)
    y = rng.integers(0, 4, 80)
    X = E[y] + 0.05 * rng.standard_normal((80, 4))
    est = ProjectionHead(hidden_dim=4, epochs=40, learning_rate=1e-2).fit(X, y, class_embeddings=E)
    assert est.get_params()["hidden_dim"] == 4
    assert np.mean(est.predict(X) == y) > 0.9
    with pytest.raises(ValueError):
        ProjectionHead().fit(X, y)
    with pytest.raises(ValueError):
        ProjectionHead().fit(X, y + 10, class_embeddings=E)


def test_build_dataset_split_and_determinism(small_universe):
    cfg = HeadTrainConfig(epochs_subtask=1, samples_per_class=8, test_samples_per_class=4,
                          base_samples_per_class=8)
    a = build_dataset(small_universe, 22, 20 / 22, cfg, 2, 4, block_size=8)
    assert (len(a.seen), len(a.unseen)) == (20, 2)
    seen = {frozenset(r.class_ids) for r in a.seen.records}
    unseen = {frozenset(r.class_ids) for r in a.unseen.records}
    assert len(seen) == 20 and not seen & unseen
    b = build_dataset(small_universe, 22, 20 / 22, cfg, 2, 4, block_size=8)
    assert dataset_bytes(a.seen) == dataset_bytes(b.seen)
    assert dataset_bytes(a.unseen) == dataset_bytes(b.unseen)


def test_build_dataset_parallel_matches_serial(small_universe):
    cfg = HeadTrainConfig(epochs_subtask=1, samples_per_class=8, test_samples_per_class=4,
                          base_samples_per_class=8)
    a = build_dataset(small_universe, 6, 0.5, cfg, 2, 3, block_size=8)
    b = build_dataset(small_universe, 6, 0.5, cfg, 2, 3, block_size=8, n_jobs=2)
    assert dataset_bytes(a.seen) == dataset_bytes(b.seen)


def test_build_dataset_explicit_block_count(small_universe):
    cfg = HeadTrainConfig(epochs_subtask=1, samples_per_class=8, test_samples_per_class=4,
                          base_samples_per_class=8)
    d = small_universe.feature_dim * 2 * cfg.hidden_dim
    size = -(-d // 5)
    a = build_dataset(small_universe, 4, 0.5, cfg, 2, 3, block_size=size, block_count=5)
    assert a.seen.chunks.block_count == 5 and a.seen.chunks.block_size == size
    with pytest.raises(ValueError):
        build_dataset(small_universe, 4, 0.5, cfg, 2, 3, block_size=size + 1, block_count=5)


def test_full_scale_split_arithmetic():
    assert int(round(12_000 * 0.8)) == 9_600


def test_build_dataset_errors(small_universe):
    with pytest.raises(ValueError):
        build_dataset(small_universe, 4, 1.0, HeadTrainConfig(), 2, 3, 8)
    # only 12 one-class tasks exist
    with pytest.raises(RuntimeError):
        build_dataset(small_universe, 13, 0.5, HeadTrainConfig(), 1, 1, 8)


def test_config_validation():
    with pytest.raises(ValueError):
        HeadTrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        HeadTrainConfig(activation="relu")


def test_gradcore_gelu_constants_shared():
    assert abs(gradcore.GELU_C - math.sqrt(2 / math.pi)) < 1e-15
