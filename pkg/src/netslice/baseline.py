"""Equal slicing: every class gets ``budget / K`` of each resource at every decision."""

from __future__ import annotations

import numpy as np

from .environment import Allocation, Budgets


def equal_slice(budgets: Budgets, K: int) -> Allocation:
    if K < 1:
        raise ValueError("K must be at least 1")
    return Allocation(np.full(K, budgets.bandwidth / K), np.full(K, budgets.compute / K))


class EqualSlicing:
    """State-independent allocator; allocates its full share even to idle classes."""

    name = "ES"

    def __init__(self, budgets: Budgets, K: int):
        self._alloc = equal_slice(budgets, K)

    def __call__(self, env) -> Allocation:
        return Allocation(self._alloc.bw.copy(), self._alloc.vm.copy())
