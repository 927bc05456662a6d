import itertools

import numpy as np
import pytest

from lidarfuse.hilbert import hilbert_decode, hilbert_encode, hilbert_index, order_for_extent


def enumerate_curve(dims, order):
    """Walk every cell, index it one at a time, and return cells in index order."""
    side = 1 << order
    by_index = {}
    for cell in itertools.product(range(side), repeat=dims):
        h = hilbert_index(cell, order)
        assert h not in by_index, f"index {h} hit twice"
        by_index[h] = cell
    return by_index


def test_order_one_pigeonhole():
    assert sorted(hilbert_index(c, 1) for c in [(0, 0), (0, 1), (1, 0), (1, 1)]) == [0, 1, 2, 3]


@pytest.mark.parametrize(
    "dims,order", [(2, k) for k in range(1, 7)] + [(3, k) for k in range(1, 5)]
)
def test_bijective_and_unit_steps(dims, order):
    by_index = enumerate_curve(dims, order)
    assert sorted(by_index) == list(range(1 << (dims * order)))
    for h in range(1, len(by_index)):
        step = sum(abs(a - b) for a, b in zip(by_index[h], by_index[h - 1]))
        assert step == 1, (h, by_index[h - 1], by_index[h])


@pytest.mark.parametrize("dims,order", [(2, 5), (3, 3)])
def test_decode_inverts_encode(dims, order):
    idx = np.arange(1 << (dims * order))
    assert np.array_equal(hilbert_encode(hilbert_decode(idx, order, dims), order), idx)


def test_vectorized_matches_scalar(rng):
    coords = rng.integers(0, 16, size=(50, 2))
    vec = hilbert_encode(coords, 4)
    assert vec.tolist() == [hilbert_index(c, 4) for c in coords]


def test_out_of_range_component_fails():
    with pytest.raises(ValueError):
        hilbert_index((4, 0), 2)
    with pytest.raises(ValueError):
        hilbert_index((-1, 0), 2)


def test_order_for_extent():
    assert order_for_extent(64, 64) == 6
    assert order_for_extent(65, 3) == 7
    assert order_for_extent(1, 1) == 1
