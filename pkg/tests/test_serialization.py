import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import oracle_order

from fusionpred.geometry import SparseFeatureMap
from fusionpred.serialization import (
    WindowSpec,
    group,
    in_window_index,
    positional_encoding,
    serialization_keys,
    serialize,
    ungroup,
    window_coords,
    window_index,
)


def test_window_coords_examples():
    spec = WindowSpec(4, 4, 4)
    assert window_coords((5, 3, 9), spec).tolist() == [1, 0, 2]
    assert window_coords((0, 0, 0), spec).tolist() == [0, 0, 0]
    assert window_coords((5, 3, 9), spec.with_axis("y")).tolist() == [0, 1, 2]


def test_negative_coordinate_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        window_coords((-1, 0, 0), WindowSpec(2, 2, 2))


def test_in_window_index_examples():
    spec = WindowSpec(4, 4, 4)
    assert in_window_index((5, 3, 9), spec) == 29
    assert in_window_index((4, 8, 12), spec) == 0
    cells = np.array(list(itertools.product(range(4), repeat=3)))
    idx = in_window_index(cells, spec)
    assert sorted(idx.tolist()) == list(range(64))


def test_window_index_examples():
    spec = WindowSpec(4, 4, 4)
    assert window_index((0, 0, 0), spec, (1, 1, 1)) == 0
    assert window_index((1, 0, 2), spec, (3, 3, 3)) == 11
    grid = np.array(list(itertools.product(range(3), repeat=3)))
    assert sorted(window_index(grid, spec, (3, 3, 3)).tolist()) == list(range(27))
    with pytest.raises(ValueError):
        window_index((3, 0, 0), spec, (3, 3, 3))


def test_literal_strides_collide_when_window_grid_is_large():
    spec = WindowSpec(2, 2, 2, literal_strides=True)
    # window (0, 2, 0) and (1, 0, 0) both map to 4 under W_y*W_z strides
    assert window_index((0, 2, 0), spec, (4, 4, 4)) == window_index((1, 0, 0), spec, (4, 4, 4))
    counted = WindowSpec(2, 2, 2)
    assert window_index((0, 2, 0), counted, (4, 4, 4)) != window_index((1, 0, 0), counted, (4, 4, 4))


def test_serialize_example_order():
    coords = np.array([(0, 0, 0), (1, 0, 0), (0, 1, 0), (4, 0, 0)])
    sparse = SparseFeatureMap(np.arange(4.0)[:, None], coords)
    feats, perm = serialize(sparse, WindowSpec(2, 2, 2))
    assert coords[perm].tolist() == [[0, 0, 0], [0, 1, 0], [1, 0, 0], [4, 0, 0]]
    assert feats[:, 0].tolist() == [0.0, 2.0, 1.0, 3.0]


def test_single_feature_identity():
    _, perm = serialize(SparseFeatureMap(np.ones((1, 2)), [[3, 1, 2]]), WindowSpec(2, 2, 2))
    assert perm.tolist() == [0]


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 300),
    dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    extent=st.tuples(st.integers(1, 40), st.integers(1, 40), st.integers(1, 8)),
    axis=st.sampled_from(["x", "y"]),
)
def test_serialize_matches_oracle(seed, n, dims, extent, axis):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([rng.integers(0, e, n) for e in extent])
    spec = WindowSpec(*dims, axis=axis)
    sparse = SparseFeatureMap(rng.normal(size=(n, 2)), coords)
    feats, perm = serialize(sparse, spec)
    assert perm.tolist() == oracle_order(coords.tolist(), spec)
    assert sorted(perm.tolist()) == list(range(n))
    assert np.array_equal(feats, sparse.features[perm])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200),
       dims=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)))
def test_axis_swap_relation(seed, n, dims):
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, 30, size=(n, 3))
    feats = rng.normal(size=(n, 1))
    _, perm_y = serialize(SparseFeatureMap(feats, coords), WindowSpec(*dims, axis="y"))
    _, perm_x = serialize(SparseFeatureMap(feats, coords[:, [1, 0, 2]]), WindowSpec(*dims, axis="x"))
    assert np.array_equal(perm_x, perm_y)


def test_global_index_increases_along_sequence():
    rng = np.random.default_rng(3)
    coords = rng.integers(0, 50, size=(500, 3))
    spec = WindowSpec(3, 5, 2)
    win, inwin, glob = serialization_keys(coords, spec)
    assert np.array_equal(glob, win * spec.volume + inwin)
    assert np.all(inwin < spec.volume)
    _, perm = serialize(SparseFeatureMap(np.zeros((500, 1)), coords), spec)
    g = glob[perm]
    assert np.all(np.diff(g) >= 0)
    distinct = np.diff(g) != 0
    assert np.all(np.diff(g)[distinct] > 0)


def test_group_sizes_and_padding():
    g = group(np.ones((5, 3)), 4)
    assert g.groups.shape == (2, 4, 3)
    assert (~g.mask).sum() == 3
    assert g.num_features == 5
    g = group(np.ones((4, 3)), 4)
    assert g.groups.shape == (1, 4, 3) and g.mask.all()
    g = group(np.ones((2, 3)), 4, pad_value=np.full(3, 7.0))
    assert np.all(g.groups[0, 2:] == 7.0)
    with pytest.raises(ValueError):
        group(np.ones((2, 3)), 0)


def test_group_ungroup_round_trip_fuzz():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 10001))
        gs = int(rng.integers(1, 700))
        x = rng.normal(size=(n, 2))
        assert np.array_equal(ungroup(group(x, gs)), x)


def test_positional_encoding_properties():
    pe = positional_encoding((0, 0, 0), 12)
    assert pe.shape == (12,)
    for axis in range(3):
        block = pe[axis * 4:(axis + 1) * 4]
        assert np.all(block[:2] == 0) and np.all(block[2:] == 1)
    assert np.array_equal(positional_encoding((3, 4, 5), 12), positional_encoding((3, 4, 5), 12))
    with pytest.raises(ValueError):
        positional_encoding((0, 0, 0), 10)


def test_positional_encoding_distinct_on_64_cube():
    grid = np.stack(np.meshgrid(np.arange(64), np.arange(64), np.arange(64), indexing="ij"), -1).reshape(-1, 3)
    pe = positional_encoding(grid, 24)
    uniq = np.unique(np.round(pe, 12), axis=0)
    assert len(uniq) == len(grid)
