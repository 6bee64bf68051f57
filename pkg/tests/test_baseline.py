import numpy as np
import pytest

from netslice.baseline import EqualSlicing, equal_slice
from netslice.environment import Budgets


def test_even_split():
    a = equal_slice(Budgets(9, 30), 3)
    np.testing.assert_array_equal(a.bw, [3, 3, 3])
    np.testing.assert_array_equal(a.vm, [10, 10, 10])


def test_uneven_split_sums_to_budget():
    a = equal_slice(Budgets(10, 10), 3)
    assert a.bw.sum() == pytest.approx(10, rel=1e-12)
    assert len(set(a.bw.tolist())) == 1


def test_zero_budget():
    a = equal_slice(Budgets(0, 0), 4)
    assert not a.bw.any() and not a.vm.any()


def test_no_classes_rejected():
    with pytest.raises(ValueError):
        equal_slice(Budgets(1, 1), 0)


def test_allocator_ignores_state_and_returns_copies():
    es = EqualSlicing(Budgets(6, 12), 2)
    first = es(None)
    first.bw[:] = -1
    again = es(None)
    np.testing.assert_array_equal(again.bw, [3, 3])
    np.testing.assert_array_equal(again.vm, [6, 6])
