import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textweights.headtrainer import HeadWeights, head_forward, logits
from textweights.weightspace import (ChunkSpec, FlatWeights, ParamSchema, PermSpec,
                                     apply_permutation, apply_permutation_flatvec, chunk,
                                     chunk_spec, chunk_spec_for_count, compose,
                                     denormalize_blocks, flatten, from_normalized,
                                     normalize_blocks, permutation_index, sample_permutation,
                                     to_normalized, unchunk, unflatten)


def random_flat(rng, F, r):
    schema = ParamSchema(F, r)
    return FlatWeights(schema, rng.standard_normal(schema.d))


def test_flatten_order():
    flat = flatten([[1.0], [2.0]], [[3.0, 4.0]], ParamSchema(2, 1))
    np.testing.assert_array_equal(flat.values, [1, 2, 3, 4])


def test_flatten_zero_matrices():
    s = ParamSchema(3, 2)
    flat = flatten(np.zeros((3, 2)), np.zeros((2, 3)), s)
    np.testing.assert_array_equal(flat.values, np.zeros(12))


def test_flatten_round_trip():
    rng = np.random.default_rng(0)
    s = ParamSchema(4, 2)
    W1, W2 = rng.standard_normal((4, 2)), rng.standard_normal((2, 4))
    A, B = unflatten(flatten(W1, W2, s))
    assert np.array_equal(A, W1) and np.array_equal(B, W2)


def test_flatten_shape_mismatch():
    with pytest.raises(ValueError):
        flatten(np.zeros((2, 3)), np.zeros((2, 3)), ParamSchema(2, 3))


@pytest.mark.parametrize("d,s,count,pad", [(10, 4, 3, 2), (8, 8, 1, 0), (256, 16, 16, 0)])
def test_chunk_arithmetic(d, s, count, pad):
    blocks, spec = chunk(np.arange(d, dtype=float), s)
    assert (spec.block_count, spec.pad_length) == (count, pad)
    assert all(b.size == s for b in blocks)
    np.testing.assert_array_equal(unchunk(blocks, spec), np.arange(d))


def test_block_count_configuration_of_the_large_head():
    # 512 x 16 x 2 weights in 576 uniform blocks
    spec = chunk_spec_for_count(16384, 576)
    assert spec.block_size == 29
    assert spec.pad_length == 16704 - 16384 == 320


def test_chunk_spec_rejects_zero_block():
    with pytest.raises(ValueError):
        chunk_spec(10, 0)


def test_normalize_endpoints():
    out, spec = normalize_blocks([[0.0, 5.0, 10.0]])
    np.testing.assert_array_equal(out[0], [-1.0, 0.0, 1.0])
    assert spec.mins[0] == 0.0 and spec.maxs[0] == 10.0


def test_constant_block_normalizes_to_zero_and_restores():
    c = 3.25
    out, spec = normalize_blocks([[c, c, c]])
    np.testing.assert_array_equal(out[0], [0.0, 0.0, 0.0])
    assert spec.mins[0] == spec.maxs[0] == c
    np.testing.assert_array_equal(denormalize_blocks(out, spec)[0], [c, c, c])


def test_normalize_rejects_empty():
    with pytest.raises(ValueError):
        normalize_blocks(np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 9))
def test_normalize_round_trip(seed, s):
    rng = np.random.default_rng(seed)
    blocks, spec = chunk(rng.standard_normal(rng.integers(1, 40)) * 10, s)
    norm, spec = normalize_blocks(blocks, spec)
    assert all(np.all(np.abs(b) <= 1.0) for b in norm)
    back = denormalize_blocks(norm, spec)
    assert np.max(np.abs(np.asarray(back) - np.asarray(blocks))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_full_pipeline_round_trip(seed):
    rng = np.random.default_rng(seed)
    F, r = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    W1, W2 = rng.standard_normal((F, r)), rng.standard_normal((r, F))
    flat = flatten(W1, W2, ParamSchema(F, r))
    blocks, spec = chunk(flat, int(rng.integers(1, 7)))
    norm, spec = normalize_blocks(blocks, spec)
    back = unflatten(FlatWeights(flat.schema, unchunk(denormalize_blocks(norm, spec), spec)))
    assert np.max(np.abs(back[0] - W1)) <= 1e-12 and np.max(np.abs(back[1] - W2)) <= 1e-12


def test_batch_normalization_helpers_agree_with_blockwise():
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((3, 10))
    spec = chunk_spec(10, 4)
    padded = np.concatenate([rows, np.zeros((3, 2))], axis=1).reshape(3, 3, 4)
    spec = spec.with_stats(padded.min(axis=(0, 2)), padded.max(axis=(0, 2)))
    norm = to_normalized(rows, spec)
    for i in range(3):
        blocks, _ = chunk(rows[i], 4)
        expect, _ = normalize_blocks(blocks, spec)
        np.testing.assert_allclose(norm[i], np.concatenate(expect), atol=0, rtol=0)
    np.testing.assert_allclose(from_normalized(norm, spec), rows, atol=1e-12)


def test_sample_permutation_r1_identity():
    rng = np.random.default_rng(0)
    assert all(sample_permutation(rng, 1).is_identity() for _ in range(20))


def test_sample_permutation_r2_balance():
    rng = np.random.default_rng(0)
    n = 10_000
    swaps = sum(not sample_permutation(rng, 2).is_identity() for _ in range(n))
    assert abs(swaps - n / 2) <= 3 * np.sqrt(n * 0.25)


def test_sample_permutation_r3_uniform():
    rng = np.random.default_rng(7)
    n = 12_000
    counts = {}
    for _ in range(n):
        key = tuple(sample_permutation(rng, 3).permutation)
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    p = 1 / 6
    for c in counts.values():
        assert abs(c - n * p) <= 4 * np.sqrt(n * p * (1 - p))


def test_permspec_rejects_non_bijection():
    with pytest.raises(ValueError):
        PermSpec([0, 0, 1])


def test_swap_example():
    s = ParamSchema(1, 2)
    flat = flatten([[1.0, 2.0]], [[3.0], [4.0]], s)
    W1, W2 = unflatten(apply_permutation(flat, PermSpec([1, 0])))
    np.testing.assert_array_equal(W1, [[2.0, 1.0]])
    np.testing.assert_array_equal(W2, [[4.0], [3.0]])


def test_structured_action_is_matrix_product():
    rng = np.random.default_rng(3)
    flat = random_flat(rng, 5, 4)
    g = sample_permutation(rng, 4)
    P = np.zeros((4, 4))
    P[np.arange(4), g.permutation] = 1.0
    W1, W2 = unflatten(flat)
    A, B = unflatten(apply_permutation(flat, g))
    np.testing.assert_array_equal(A, W1 @ P)
    np.testing.assert_array_equal(B, P.T @ W2)


def test_identity_permutation_is_noop():
    rng = np.random.default_rng(2)
    flat = random_flat(rng, 3, 3)
    assert np.array_equal(apply_permutation(flat, PermSpec.identity(3)).values, flat.values)


def test_dimension_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        apply_permutation(random_flat(rng, 3, 3), PermSpec([1, 0]))
    with pytest.raises(ValueError):
        apply_permutation_flatvec(np.zeros(5), PermSpec([1, 0, 2]), ParamSchema(3, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_group_laws(seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, 7))
    flat = random_flat(rng, int(rng.integers(1, 5)), r)
    g1, g2 = sample_permutation(rng, r), sample_permutation(rng, r)
    lhs = apply_permutation(flat, compose(g1, g2)).values
    rhs = apply_permutation(apply_permutation(flat, g2), g1).values
    assert np.array_equal(lhs, rhs)
    back = apply_permutation(apply_permutation(flat, g1), g1.inverse()).values
    assert np.array_equal(back, flat.values)
    assert compose(g1, g1.inverse()).is_identity()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_flatvec_action_agrees_with_structured(seed):
    rng = np.random.default_rng(seed)
    F, r = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    flat = random_flat(rng, F, r)
    g = sample_permutation(rng, r)
    assert np.array_equal(apply_permutation_flatvec(flat.values, g, flat.schema),
                          apply_permutation(flat, g).values)
    assert np.array_equal(apply_permutation_flatvec(flat.values, PermSpec.identity(r),
                                                    flat.schema), flat.values)


def test_padding_positions_never_move():
    s = ParamSchema(3, 4)
    for g in itertools.permutations(range(4)):
        idx = permutation_index(PermSpec(np.asarray(g)), s, s.d + 5)
        np.testing.assert_array_equal(idx[s.d:], np.arange(s.d, s.d + 5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["gelu", "none"]))
def test_functional_invariance(seed, activation):
    rng = np.random.default_rng(seed)
    F, r = int(rng.integers(2, 8)), int(rng.integers(1, 6))
    flat = random_flat(rng, F, r)
    g = sample_permutation(rng, r)
    x = rng.standard_normal((6, F))
    E = rng.standard_normal((3, F))
    a = logits(head_forward(x, HeadWeights(*unflatten(flat)), activation), E)
    b = logits(head_forward(x, HeadWeights(*unflatten(apply_permutation(flat, g))), activation), E)
    assert np.max(np.abs(a - b)) <= 1e-10


def test_chunk_spec_rejects_inverted_stats():
    with pytest.raises(ValueError):
        ChunkSpec(2, 1, 0).with_stats([1.0], [0.0])
