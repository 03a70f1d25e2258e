import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reaper.sumtree import SumTree


def test_capacity_is_power_of_two():
    assert SumTree(5).capacity == 8
    assert SumTree(8).capacity == 8
    assert SumTree(1).capacity == 1


def test_scalar_and_batch_updates_agree():
    a, b = SumTree(6), SumTree(6)
    vals = [0.5, 0.0, 2.0, 1.5, 0.25, 3.0]
    for i, v in enumerate(vals):
        a.update(i, v)
    b.update(np.arange(6), vals)
    np.testing.assert_array_equal(a.nodes, b.nodes)
    assert a.total == pytest.approx(sum(vals))
    assert a.min == 0.25


def test_duplicate_indices_keep_last_write():
    t = SumTree(4)
    t.update([1, 1, 2], [5.0, 7.0, 1.0])
    assert t[1] == 7.0 and t.total == 8.0


def test_rejects_bad_input():
    t = SumTree(4)
    with pytest.raises(IndexError):
        t.update(4, 1.0)
    with pytest.raises(ValueError):
        t.update(0, -1.0)
    with pytest.raises(ValueError):
        t.update([0], [np.nan])


def test_find_edges():
    t = SumTree(4)
    t.update(np.arange(4), [1.0, 0.0, 0.0, 3.0])
    np.testing.assert_array_equal(t.find([1e-12, 1.0, 1.0 + 1e-9, 4.0]), [0, 0, 3, 3])


def test_find_never_returns_zero_leaf_at_the_top():
    t = SumTree(8)
    t.update(np.arange(3), [1.0, 2.0, 0.5])
    assert t.find([t.total])[0] == 2


ops = st.lists(st.tuples(st.integers(0, 63), st.floats(min_value=0.0, max_value=100.0)), max_size=200)


@settings(max_examples=100)
@given(st.integers(1, 64), ops)
def test_consistency_with_flat_oracle(size, operations):
    tree = SumTree(size)
    flat = np.zeros(size)
    for idx, value in operations:
        idx %= size
        tree.update(idx, value)
        flat[idx] = value
        assert tree.check(1e-9)
    np.testing.assert_array_equal(tree.leaves, flat)
    assert tree.total == pytest.approx(flat.sum(), rel=1e-9, abs=1e-12)
    positive = flat[flat > 0]
    assert tree.min == (positive.min() if positive.size else np.inf)


@settings(max_examples=100)
@given(st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=1, max_size=64), st.data())
def test_find_matches_cumsum_search(values, data):
    tree = SumTree(len(values))
    tree.update(np.arange(len(values)), values)
    flat = np.asarray(values)
    if flat.sum() <= 0:
        return
    cum = np.cumsum(flat)
    u = np.array(data.draw(st.lists(st.floats(min_value=1e-9, max_value=1.0), min_size=1, max_size=20)))
    targets = u * tree.total
    got = tree.find(targets)
    assert np.all(flat[got] > 0)
    # interval containment, allowing for summation-order rounding
    lo = np.where(got > 0, cum[np.maximum(got - 1, 0)], 0.0)
    assert np.all(targets >= lo - 1e-9) and np.all(targets <= cum[got] + 1e-9)


def test_node_visits_are_logarithmic():
    tree = SumTree(1024)
    tree.node_visits = 0
    tree.update(17, 1.0)
    assert tree.node_visits == tree.depth + 1
    tree.node_visits = 0
    tree.find(np.full(8, 0.5))
    assert tree.node_visits == 8 * tree.depth
