import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpfpl.data import (
    _largest_remainder,
    dirichlet_split,
    eval_sets,
    generate,
    load_json,
    neighbor_classes,
    pathological_split,
    save_json,
)
from dpfpl.numeric import RngStream


def ds(c=8, per=20, m=4, seed=0, noise=0.5):
    return generate(c, per, m, noise, RngStream(seed))


@given(st.integers(2, 10), st.integers(2, 40), st.integers(1, 6), st.integers(0, 1000))
def test_counts_and_stratified_split(c, per, m, seed):
    d = ds(c, per, m, seed)
    n_test = max(1, min(per - 1, round(0.3 * per)))
    assert len(d.y_train) + len(d.y_test) == c * per
    assert np.array_equal(np.bincount(d.y_test, minlength=c), np.full(c, n_test))
    assert np.array_equal(np.bincount(d.y_train, minlength=c), np.full(c, per - n_test))
    assert d.x_train.shape == (len(d.y_train), m)


def test_generation_reproducible():
    a, b = ds(seed=3), ds(seed=3)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.x_train, ds(seed=4).x_train)


def test_zero_noise_samples_sit_on_means():
    d = ds(noise=0.0)
    np.testing.assert_array_equal(d.x_train, d.class_means[d.y_train])


def test_separable_blobs_nearest_mean():
    d = generate(8, 50, 16, 0.3, RngStream(1), mean_scale=1.0)
    dist = ((d.x_test[:, None, :] - d.class_means[None]) ** 2).sum(-1)
    assert np.mean(dist.argmin(1) == d.y_test) > 0.95


@pytest.mark.parametrize("args", [(1, 10, 4), (3, 1, 4), (3, 10, 0)])
def test_generate_rejects_bad_sizes(args):
    with pytest.raises(ValueError):
        generate(*args, 0.5, RngStream(0))


def test_generate_rejects_duplicate_means():
    with pytest.raises(ValueError, match="distinct"):
        generate(2, 5, 2, 0.1, RngStream(0), class_means=np.ones((2, 2)))


def test_draw_is_fresh():
    d = ds()
    x = d.draw(d.y_train[:5], RngStream(99))
    assert x.shape == (5, d.dim)
    assert not any(np.allclose(x[0], row) for row in d.x_train)


@given(st.integers(1, 4), st.integers(1, 2), st.integers(0, 1000))
def test_pathological_split_disjoint(n, cpc, seed):
    d = ds(c=8)
    plan = pathological_split(d, n, cpc, RngStream(seed))
    owned = [set(c) for c in plan.local_classes]
    assert all(len(o) == cpc for o in owned)
    assert sum(len(o) for o in owned) == len(set().union(*owned))
    for i in range(n):
        assert set(d.y_train[plan.shard(i)]) == owned[i]
        assert len(plan.shard(i)) == cpc * np.sum(d.y_train == 0)


def test_pathological_needs_enough_classes():
    with pytest.raises(ValueError, match="not enough classes"):
        pathological_split(ds(c=4), 3, 2, RngStream(0))


@given(st.integers(2, 6), st.floats(0.05, 10.0), st.integers(0, 1000))
def test_dirichlet_split_partitions_everything(n, alpha, seed):
    d = ds(c=5)
    plan = dirichlet_split(d, n, alpha, RngStream(seed))
    assert np.all(plan.assignment >= 0)
    assert sum(len(plan.shard(i)) for i in range(n)) == len(d.y_train)
    for i in range(n):
        assert set(d.y_train[plan.shard(i)]) == set(plan.local_classes[i])


def test_dirichlet_small_alpha_is_skewed():
    d = ds(c=8, per=100)
    plan = dirichlet_split(d, 4, 0.05, RngStream(0))
    counts = np.array([[np.sum(d.y_train[plan.shard(i)] == c) for c in range(8)] for i in range(4)])
    assert np.mean(counts.max(0) / counts.sum(0)) > 0.8


def test_dirichlet_bad_arguments():
    with pytest.raises(ValueError):
        dirichlet_split(ds(), 4, 0.0, RngStream(0))
    with pytest.raises(ValueError):
        dirichlet_split(ds(), 1, 1.0, RngStream(0))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.integers(0, 500))
def test_largest_remainder_sums_to_total(w, total):
    w = np.asarray(w)
    if w.sum() == 0:
        w = np.ones_like(w)
    w = w / w.sum()
    counts = _largest_remainder(w, total)
    assert counts.sum() == total and np.all(counts >= 0)
    assert np.all(np.abs(counts - w * total) < 1 + 1e-9)


def test_eval_sets_and_neighbors():
    d = ds(c=8)
    plan = pathological_split(d, 4, 2, RngStream(0))
    sets = eval_sets(plan, d)
    for i, (loc, nb) in enumerate(sets):
        assert set(d.y_test[loc]) == set(plan.local_classes[i])
        assert set(d.y_test[nb]) == set(neighbor_classes(plan, i))
        assert not set(d.y_test[loc]) & set(d.y_test[nb])


def test_json_roundtrip(tmp_path):
    d = ds()
    plan = pathological_split(d, 2, 2, RngStream(0))
    save_json(tmp_path / "d.json", d, plan)
    d2, plan2 = load_json(tmp_path / "d.json")
    assert np.array_equal(d2.x_train, d.x_train) and np.array_equal(d2.y_test, d.y_test)
    assert np.array_equal(plan2.assignment, plan.assignment) and plan2.local_classes == plan.local_classes
    save_json(tmp_path / "e.json", d)
    assert load_json(tmp_path / "e.json")[1] is None
