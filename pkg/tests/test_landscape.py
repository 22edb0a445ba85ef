import json

import numpy as np
import pytest

from textweights.headtrainer import HeadTrainConfig, train_head
from textweights.landscape import (TaskLoss, cache_key, compute_grid, emit_grid, grid_axis,
                                   random_direction, read_grid, trajectory_direction)
from textweights.taskgen import make_task, make_universe
from textweights.weightspace import ParamSchema

SCHEMA = ParamSchema(8, 4)


@pytest.fixture(scope="module")
def setup():
    u = make_universe(10, 8, 8, alignment=0.5, seed=0)
    cfg = HeadTrainConfig(epochs_subtask=6, learning_rate=1e-3)
    task = make_task(0, [0, 3, 6], u)
    head, _ = train_head(task, u, None, cfg)
    start, _ = train_head(task, u, None, cfg, epochs=0)
    return u, cfg, task, head.flat().values, start.flat().values


def test_trajectory_direction_unit_and_scale_free():
    a = np.zeros(5)
    e1 = np.eye(5)[0]
    np.testing.assert_array_equal(trajectory_direction(a, a + e1), e1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.standard_normal(7), rng.standard_normal(7)
        d = trajectory_direction(x, y)
        assert abs(np.linalg.norm(d) - 1.0) <= 1e-12
        np.testing.assert_allclose(trajectory_direction(x, x + 2 * (y - x)), d, atol=1e-15)
    with pytest.raises(ValueError):
        trajectory_direction(a, a)


def test_random_direction_layer_norms_and_determinism():
    ref = np.random.default_rng(0).standard_normal(SCHEMA.d)
    d2 = random_direction(np.random.default_rng(1), SCHEMA, ref)
    for sl in SCHEMA.layer_slices:
        assert abs(np.linalg.norm(d2[sl]) - np.linalg.norm(ref[sl])) <= 1e-12
    np.testing.assert_array_equal(d2, random_direction(np.random.default_rng(1), SCHEMA, ref))


def test_random_direction_nearly_orthogonal():
    schema = ParamSchema(16, 2)
    ref = trajectory_direction(np.zeros(schema.d), np.random.default_rng(0).standard_normal(schema.d))
    cos = []
    for seed in range(200):
        d2 = random_direction(np.random.default_rng(seed), schema, ref)
        cos.append(abs(d2 @ ref) / np.linalg.norm(d2))
    assert np.mean(np.asarray(cos) < 0.3) >= 0.95


def test_grid_axis():
    ax = grid_axis(-4, 4, 25)
    assert ax[12] == 0.0 and ax[0] == -4 and ax[-1] == 4
    np.testing.assert_array_equal(grid_axis(0, 0, 1), [0.0])
    with pytest.raises(ValueError):
        grid_axis(-1, 1, 1)


def test_origin_equals_baseline_and_restoration(setup):
    u, cfg, task, theta, start = setup
    d1 = trajectory_direction(start, theta)
    d2 = random_direction(np.random.default_rng(0), SCHEMA, d1)
    keep = theta.copy()
    loss = TaskLoss(task, u, cfg)
    grid = compute_grid(theta, d1, d2, loss, resolution=5)
    assert grid.Z[2, 2] == grid.baseline == loss(theta)
    assert np.array_equal(theta, keep)
    single = compute_grid(theta, d1, d2, loss, (0.0, 0.0), (0.0, 0.0), resolution=1)
    assert single.Z.shape == (1, 1) and single.Z[0, 0] == grid.baseline


def test_negated_directions_flip_grid(setup):
    u, cfg, task, theta, start = setup
    d1 = trajectory_direction(start, theta)
    d2 = random_direction(np.random.default_rng(1), SCHEMA, d1)
    loss = TaskLoss(task, u, cfg)
    a = compute_grid(theta, d1, d2, loss, resolution=7)
    b = compute_grid(theta, -d1, -d2, loss, resolution=7)
    assert np.max(np.abs(a.Z - b.Z[::-1, ::-1])) <= 1e-12


def test_cache_round_trip_without_evaluations(setup, tmp_path):
    u, cfg, task, theta, start = setup
    d1 = trajectory_direction(start, theta)
    d2 = random_direction(np.random.default_rng(2), SCHEMA, d1)
    loss = TaskLoss(task, u, cfg)
    first = compute_grid(theta, d1, d2, loss, resolution=6, cache_dir=tmp_path)
    n = loss.calls
    # baseline plus every point; 0 is not a coordinate of an even-sized grid
    assert n == 6 * 6 + 1
    second = compute_grid(theta, d1, d2, loss, resolution=6, cache_dir=tmp_path)
    assert loss.calls == n
    assert second.Z.tobytes() == first.Z.tobytes() and second.baseline == first.baseline


def test_corrupt_cache_recomputes(setup, tmp_path, caplog):
    u, cfg, task, theta, start = setup
    d1 = trajectory_direction(start, theta)
    d2 = random_direction(np.random.default_rng(3), SCHEMA, d1)
    loss = TaskLoss(task, u, cfg)
    grid = compute_grid(theta, d1, d2, loss, resolution=3, cache_dir=tmp_path)
    (path,) = tmp_path.glob("landscape-*.json")
    path.write_text("{not json")
    again = compute_grid(theta, d1, d2, loss, resolution=3, cache_dir=tmp_path)
    assert "recomputing" in caplog.text
    assert np.array_equal(again.Z, grid.Z)
    assert json.loads(path.read_text())["cache_key"] == grid.cache_key


def test_cache_key_sensitivity():
    t, d1, d2 = np.zeros(4), np.ones(4), np.arange(4.0)
    k = cache_key(t, d1, d2, (-1, 1), (-1, 1), 3)
    assert k == cache_key(t.copy(), d1, d2, (-1, 1), (-1, 1), 3)
    assert k != cache_key(t, d1, d2, (-1, 1), (-1, 1), 4)
    assert k != cache_key(t, d1, d2, (-1, 1), (-2, 1), 3)
    assert k != cache_key(t, d1, d2, (-1, 1), (-1, 1), 3, tag="train")


def test_emit_and_parse_back(setup, tmp_path):
    u, cfg, task, theta, start = setup
    d1 = trajectory_direction(start, theta)
    d2 = random_direction(np.random.default_rng(4), SCHEMA, d1)
    grid = compute_grid(theta, d1, d2, TaskLoss(task, u, cfg), (-1, 1), (-1, 1), resolution=2)
    emit_grid(grid, tmp_path / "g.csv", "csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "alpha,beta,loss" and len(lines) == 5
    assert lines[1].startswith("-1.0,-1.0,") and lines[2].startswith("-1.0,1.0,")
    for fmt in ("csv", "json"):
        emit_grid(grid, tmp_path / f"g.{fmt}", fmt)
        a, b, Z = read_grid(tmp_path / f"g.{fmt}", fmt)
        np.testing.assert_array_equal(a, grid.alphas)
        np.testing.assert_array_equal(b, grid.betas)
        np.testing.assert_array_equal(Z, grid.Z)
        first = (tmp_path / f"g.{fmt}").read_bytes()
        emit_grid(grid, tmp_path / f"g.{fmt}", fmt)
        assert (tmp_path / f"g.{fmt}").read_bytes() == first
    with pytest.raises(ValueError):
        emit_grid(grid, tmp_path / "g.xml", "xml")
