import itertools
import math

import numpy as np
import pytest

from textweights.downstream import (EvalConfig, FusionResult, as_head, csv_table, enhance,
                                    evaluate, fuse_by_text, fuse_interpolate, fusion_baselines,
                                    init_compare, markdown_table, permutation_align,
                                    permutation_align_bruteforce, predict_labels,
                                    union_accuracies, universal_baseline)
from textweights.headtrainer import (INIT_FORMULAS, HeadTrainConfig, HeadWeights, init_head,
                                     train_head)
from textweights.taskgen import make_task, make_universe
from textweights.weightspace import (FlatWeights, ParamSchema, apply_permutation, compose,
                                     sample_permutation)


@pytest.fixture(scope="module")
def universe():
    return make_universe(12, 8, 8, alignment=0.5, seed=2)


CFG = HeadTrainConfig(epochs_subtask=8, learning_rate=1e-3)


def _flat(rng, F=4, r=3):
    s = ParamSchema(F, r)
    return FlatWeights(s, rng.standard_normal(s.d))


class _Oracle:
    """Stand-in generator returning fixed weights regardless of condition."""

    def __init__(self, values):
        self.values = np.asarray(values)

    def sample(self, cond, random_state=0):
        return np.tile(self.values, (np.atleast_2d(cond).shape[0], 1))

    def enhance(self, weights, cond, from_step=None, random_state=0):
        return np.tile(self.values, (np.atleast_2d(weights).shape[0], 1))


def test_evaluate_own_record_matches_stored_accuracy(universe):
    task = make_task(3, [0, 4, 7], universe)
    head, m = train_head(task, universe, None, CFG)
    acc, mse = evaluate(head.rounded().flat().values, task, universe, CFG,
                        target=head.rounded())
    assert acc == m["test_accuracy"] and mse == 0.0


def test_random_weights_near_chance(universe):
    rng = np.random.default_rng(0)
    task = make_task(0, [1, 2, 3, 5], universe)
    cfg = HeadTrainConfig(test_samples_per_class=250)
    accs = [evaluate(rng.standard_normal(64), make_task(i, task.class_ids, universe), universe,
                     cfg)[0] for i in range(20)]
    # 20 x 1000 predictions; a random head is a random (but fixed) classifier per draw
    assert abs(np.mean(accs) - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 20) + 0.05


def test_argmax_invariance_under_permutation(universe):
    task = make_task(1, [2, 6, 9, 11], universe)
    head, _ = train_head(task, universe, None, CFG)
    flat = head.flat()
    base, _ = evaluate(flat, task, universe, CFG)
    rng = np.random.default_rng(1)
    for _ in range(6):
        assert evaluate(apply_permutation(flat, sample_permutation(rng, 4)), task, universe,
                        CFG)[0] == base


def test_zero_projection_predicts_first_class():
    head = HeadWeights(np.zeros((3, 2)), np.zeros((2, 3)))
    np.testing.assert_array_equal(predict_labels(head, np.ones((4, 3)), np.eye(3)), [0, 0, 0, 0])


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(tau=1.5)
    with pytest.raises(ValueError):
        EvalConfig(test_samples_per_class=0)


def test_as_head_requires_schema():
    with pytest.raises(ValueError):
        as_head(np.zeros(8))


# -- initialization --------------------------------------------------------

def test_xavier_bound_example():
    h = init_head("xavier-uniform", ParamSchema(4, 2), np.random.default_rng(0))
    big = init_head("xavier-uniform", ParamSchema(4, 2), np.random.default_rng(1))
    assert np.max(np.abs(h.W1)) <= 1.0 and np.max(np.abs(big.W1)) <= 1.0
    assert "sqrt(6 / (fan_in + fan_out))" in INIT_FORMULAS["xavier-uniform"]


def test_normal_init_std():
    h = init_head("normal", ParamSchema(100, 50), np.random.default_rng(0))
    sd = np.concatenate([h.W1.ravel(), h.W2.ravel()]).std()
    assert abs(sd / 0.01 - 1.0) < 0.05


def test_init_compare_rows(universe):
    task = make_task(2, [0, 1, 2], universe)
    methods = ["xavier-uniform", "kaiming-normal", "uniform", "normal", "t2w"]
    w = init_head("xavier-uniform", ParamSchema(8, 4), np.random.default_rng(5)).flat().values
    rows = init_compare(task, universe, methods, CFG, model=_Oracle(w), epochs=2)
    assert [r["method"] for r in rows] == methods
    assert all(0 <= r["accuracy"] <= 1 and np.isfinite(r["test_loss"]) for r in rows)
    with pytest.raises(ValueError):
        init_compare(task, universe, ["orthogonal"], CFG, epochs=1)
    with pytest.raises(ValueError):
        init_compare(task, universe, ["t2w"], CFG, epochs=1)
    md = markdown_table(rows, ("method", "accuracy"))
    assert md.count("\n") == len(rows) + 2
    assert csv_table(rows, ("method", "accuracy")).splitlines()[0] == "method,accuracy"


# -- fusion ----------------------------------------------------------------

def test_interpolation_identities():
    rng = np.random.default_rng(0)
    a, b = _flat(rng), _flat(rng)
    np.testing.assert_array_equal(fuse_interpolate(a, a).values, a.values)
    np.testing.assert_array_equal(fuse_interpolate(a, FlatWeights(a.schema, -a.values)).values, 0)
    mid = fuse_interpolate(a, b).values
    for i in range(a.values.size):
        assert mid[i] == 0.5 * a.values[i] + 0.5 * b.values[i]
    with pytest.raises(ValueError):
        fuse_interpolate(a, _flat(rng, F=5))


def test_interpolation_commutes_with_permutation():
    rng = np.random.default_rng(1)
    a, b = _flat(rng), _flat(rng)
    g = sample_permutation(rng, 3)
    lhs = fuse_interpolate(apply_permutation(a, g), apply_permutation(b, g)).values
    np.testing.assert_array_equal(lhs, apply_permutation(fuse_interpolate(a, b), g).values)


@pytest.mark.parametrize("r", [1, 2, 3, 4, 5, 6, 7, 8])
def test_planted_permutation_recovered(r):
    rng = np.random.default_rng(r)
    a = _flat(rng, F=5, r=r)
    g = sample_permutation(rng, r)
    b = apply_permutation(a, g)
    found, aligned = permutation_align(a, b)
    assert compose(found, g).is_identity()
    np.testing.assert_array_equal(aligned.values, a.values)


def test_alignment_matches_bruteforce():
    rng = np.random.default_rng(3)
    for r in (2, 3, 4, 5, 6):
        a, b = _flat(rng, F=4, r=r), _flat(rng, F=4, r=r)
        g_lap, _ = permutation_align(a, b)
        g_bf, _ = permutation_align_bruteforce(a, b)
        assert np.array_equal(g_lap.permutation, g_bf.permutation)


def test_alignment_identity_and_idempotent():
    rng = np.random.default_rng(4)
    a, b = _flat(rng, r=4), _flat(rng, r=4)
    assert permutation_align(a, a)[0].is_identity()
    _, aligned = permutation_align(a, b)
    assert permutation_align(a, aligned)[0].is_identity()
    with pytest.raises(ValueError):
        permutation_align_bruteforce(_flat(rng, r=9), _flat(rng, r=9))


def test_fuse_by_text_degenerate_and_ranges(universe):
    task = make_task(4, [3, 8], universe)
    head, _ = train_head(task, universe, None, CFG)
    oracle = _Oracle(head.flat().values)
    res = fuse_by_text(task, task, universe, oracle, CFG, allow_overlap=True)
    single, _ = evaluate(head, task, universe, CFG)
    assert res.accuracy_a == res.accuracy_b == single
    with pytest.raises(ValueError):
        fuse_by_text(task, task, universe, oracle, CFG)


def test_fusion_baselines_and_union_labels(universe):
    ta, tb = make_task(5, [0, 1], universe), make_task(6, [2, 3], universe)
    ha, _ = train_head(ta, universe, None, CFG)
    hb, _ = train_head(tb, universe, None, CFG)
    rows = fusion_baselines(ta, tb, universe, ha, hb, CFG)
    assert [r.method for r in rows] == ["interpolation", "perm-aligned-interpolation"]
    for r in rows:
        assert 0 <= r.accuracy_a <= 1 and 0 <= r.accuracy_b <= 1
        assert r.average == 0.5 * (r.accuracy_a + r.accuracy_b)
    acc_a, _ = union_accuracies(ha, ta, tb, universe, CFG)
    assert 0 <= acc_a <= 1
    assert FusionResult("interpolation", 0.2, 0.6).average == pytest.approx(0.4)


# -- enhancement and universal baseline ------------------------------------

def test_enhance_with_oracle_generator(universe):
    task = make_task(7, [1, 5, 9], universe)
    good, _ = train_head(task, universe, None, CFG, epochs=40)
    before, after = enhance(task, universe, _Oracle(good.flat().values), CFG, fraction=0.25)
    assert 0 <= before <= 1 and 0 <= after <= 1
    assert after == evaluate(good.flat().values, task, universe, CFG)[0]
    with pytest.raises(ValueError):
        enhance(task, universe, _Oracle(good.flat().values), CFG, fraction=0.0)


def test_universal_baseline():
    u = make_universe(10, 16, 16, alignment=0.5, seed=2)
    cfg = HeadTrainConfig(epochs_subtask=10, learning_rate=1e-3)
    head = universal_baseline(u, cfg)
    assert np.array_equal(head.W1, universal_baseline(u, cfg).W1)
    for ids in itertools.islice(itertools.combinations(range(10), 3), 0, None, 7):
        acc, _ = evaluate(head, make_task(0, ids, u), u, cfg)
        assert acc >= 1 / 3
    acc, _ = evaluate(head, make_task(0, [4], u), u, cfg)
    assert acc == 1.0
