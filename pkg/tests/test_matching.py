import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from spanset.intervals import TimeSpan
from spanset.matching import (
    Assignment, CostMatrix, DimensionError, brute_force_assign, build_cost_matrix, hungarian,
)


def _valid(a: Assignment, k: int) -> bool:
    preds = [j for _, j in a.pairs]
    return [i for i, _ in a.pairs] == list(range(k)) and len(set(preds)) == len(preds)


def _enumerate(c: np.ndarray):
    """Independent oracle: all injective maps with their costs, in lexicographic order."""
    k, n = c.shape
    return [(sum(c[i, j] for i, j in enumerate(p)), p) for p in itertools.permutations(range(n), k)]


def test_cost_matrix_examples():
    t = TimeSpan(0.2, 0.6)
    assert build_cost_matrix([(t, 0)], [t], [[1.0]], (1, 1)).values[0, 0] == pytest.approx(-1.0)
    m = build_cost_matrix([(TimeSpan(0.0, 0.2), 0)], [TimeSpan(0.8, 1.0)], [[0.0, 1.0]], (1, 1))
    assert m.values[0, 0] == pytest.approx(0 + 1.6 + 1.6)
    m = build_cost_matrix([(TimeSpan(0.1, 0.5), 1)], [TimeSpan(0.3, 0.7)], [[0.3, 0.7]], (1, 3))
    assert m.values[0, 0] == pytest.approx(-0.7 + 0.4 + 3 * (2 / 3))


def test_cost_matrix_rejects_mismatch():
    t = TimeSpan(0.1, 0.2)
    with pytest.raises(DimensionError):
        build_cost_matrix([(t, 0)], [t, t], [[1.0]], (1, 1))
    with pytest.raises(DimensionError):
        build_cost_matrix([(t, 2)], [t], [[0.5, 0.5]], (1, 1))
    with pytest.raises(ValueError):
        build_cost_matrix([(t, 0)], [t], [[0.5, 0.4]], (1, 1))


def test_cost_monotone_in_probability_and_giou():
    t = TimeSpan(0.2, 0.5)
    preds = [TimeSpan(0.2, 0.5), TimeSpan(0.25, 0.5), TimeSpan(0.6, 0.9)]
    lo = build_cost_matrix([(t, 0)], preds, [[0.9, 0.1]] * 3, (1, 1)).values[0]
    hi = build_cost_matrix([(t, 0)], preds, [[0.4, 0.6]] * 3, (1, 1)).values[0]
    assert np.all(lo < hi)
    assert lo[0] < lo[1] < lo[2]


def test_cost_matrix_validation():
    with pytest.raises(DimensionError):
        CostMatrix(np.zeros(3))
    with pytest.raises(ValueError):
        CostMatrix(np.array([[np.inf]]))


def test_hungarian_examples():
    a = hungarian([[0, 5], [5, 0]])
    assert a.pairs == ((0, 0), (1, 1)) and a.total_cost == 0
    a = hungarian([[1, 2], [2, 4]])
    assert a.pairs == ((0, 1), (1, 0)) and a.total_cost == 4
    a = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert a.pairs == ((0, 1), (1, 0), (2, 2)) and a.total_cost == 5
    costs = sorted(c for c, _ in _enumerate(np.array([[4, 1, 3], [2, 0, 5], [3, 2, 2]], float)))
    assert costs == [5, 6, 6, 7, 9, 11]


def test_brute_force_examples():
    assert brute_force_assign([[0]]).pairs == ((0, 0),)
    a = brute_force_assign([[1, 2], [2, 4]])
    assert a.pairs == ((0, 1), (1, 0)) and a.total_cost == 4
    a = brute_force_assign([[3, 1, 2]])
    assert a.pairs == ((0, 1),) and a.total_cost == 1


def test_guards():
    with pytest.raises(DimensionError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        brute_force_assign(np.zeros((1, 10)))


def test_empty_problem():
    a = hungarian(np.zeros((0, 4)))
    assert a.pairs == () and a.total_cost == 0.0


def test_ties_take_lexicographically_smallest():
    a = hungarian(np.zeros((2, 4)))
    assert a.pairs == ((0, 0), (1, 1))
    c = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    # optima: (2,0) and (2,1); smallest is (0->2, 1->0)
    assert hungarian(c).pairs == ((0, 2), (1, 0))


@st.composite
def cost_matrices(draw, exact=True):
    n = draw(st.integers(1, 7))
    k = draw(st.integers(0, n))
    if exact:
        # multiples of 1/8 sum without rounding, so ties are genuine ties
        coarse = draw(st.booleans())
        elems = st.integers(-3, 3) if coarse else st.integers(-40, 40)
        elems = elems.map(lambda x: x / 8.0)
    else:
        elems = st.floats(-5, 5, allow_nan=False)
    return draw(arrays(np.float64, (k, n), elements=elems))


@given(cost_matrices(exact=False))
def test_hungarian_optimal_for_arbitrary_floats(c):
    k, n = c.shape
    a = hungarian(c)
    assert _valid(a, k)
    assert a.total_cost == sum(c[i, j] for i, j in a.pairs)
    if k:
        best = min(cost for cost, _ in _enumerate(c))
        assert a.total_cost <= best + 1e-12 * k * np.abs(c).max()


@given(cost_matrices())
def test_hungarian_equals_enumeration(c):
    k, n = c.shape
    a = hungarian(c)
    assert _valid(a, k)
    if k == 0:
        return
    best_cost, best_perm = min(_enumerate(c), key=lambda t: t[0])
    # min() keeps the first of equal minima, i.e. the lexicographically smallest
    assert a.total_cost == best_cost
    assert tuple(j for _, j in a.pairs) == best_perm
    assert a.total_cost == sum(c[i, j] for i, j in a.pairs)


@given(cost_matrices(), st.floats(-10, 10), st.data())
def test_row_shift_keeps_argmin(c, shift, data):
    k, n = c.shape
    if k == 0:
        return
    c = np.round(c)  # integer costs keep the shifted comparison exact
    shift = float(round(shift))
    r = data.draw(st.integers(0, k - 1))
    c2 = c.copy()
    c2[r] += shift
    a, b = hungarian(c), hungarian(c2)
    assert a.pairs == b.pairs
    assert b.total_cost == a.total_cost + shift


@given(cost_matrices())
def test_padding_equivalence(c):
    k, n = c.shape
    padded = np.zeros((n, n))
    padded[:k] = c
    full = hungarian(padded)
    rect = hungarian(c)
    assert sum(padded[i, j] for i, j in full.pairs[:k]) == pytest.approx(rect.total_cost, abs=1e-9)


def test_oracle_random_1000(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, n + 1))
        c = rng.uniform(-5, 5, (k, n))
        a, b = hungarian(c), brute_force_assign(c)
        assert a.total_cost == b.total_cost
        assert a.pairs == b.pairs
