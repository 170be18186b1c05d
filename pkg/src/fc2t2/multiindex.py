"""Graded-lexicographic tables of 3D partial-derivative multi-indices.

Every stage of the fast transform contracts over the set of multi-indices
``{(n1, n2, n3) : n1 + n2 + n3 <= rho}``.  This module fixes one canonical
ordering of that set (graded lexicographic, so truncating to a lower order
is a prefix operation) and precomputes the factorial and binomial lookup
tables that the translation kernels need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_ORDER = 4  # quartic line polynomials keep root finding closed-form


class OrderError(ValueError):
    """Raised for an expansion order outside the supported range."""


def index_count(rho: int) -> int:
    """Number of 3D multi-indices of total order <= rho."""
    return (rho + 1) * (rho + 2) * (rho + 3) // 6


@dataclass(frozen=True)
class MultiIndexTable:
    """Ordered multi-index set plus combinatorial lookups.

    Attributes
    ----------
    rho : maximum total order.
    entries : (P, 3) int array, graded-lex sorted; row 0 is (0, 0, 0).
    factorial : factorials 0! .. (2*rho)!.
    binomial : (2*rho+1, 2*rho+1) table of C(n, k).
    """

    rho: int
    entries: np.ndarray
    factorial: np.ndarray
    binomial: np.ndarray
    _lookup: dict = field(repr=False, default_factory=dict)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def index_of(self, n: tuple[int, int, int]) -> int:
        """Ordinal of multi-index ``n`` in the table."""
        key = (int(n[0]), int(n[1]), int(n[2]))
        try:
            return self._lookup[key]
        except KeyError:
            raise OrderError(f"multi-index {key} exceeds total order {self.rho}") from None

    def __contains__(self, n) -> bool:
        return (int(n[0]), int(n[1]), int(n[2])) in self._lookup

    @property
    def norms(self) -> np.ndarray:
        """Total order |n| of every entry."""
        return self.entries.sum(axis=1)

    def entry_factorial(self) -> np.ndarray:
        """Per-entry product n1! n2! n3!."""
        f = self.factorial
        e = self.entries
        return f[e[:, 0]] * f[e[:, 1]] * f[e[:, 2]]


def build_table(rho: int) -> MultiIndexTable:
    """Build the multi-index table for total order <= rho (1 <= rho <= 4)."""
    if not 1 <= rho <= MAX_ORDER:
        raise OrderError(f"expansion order must be in [1, {MAX_ORDER}], got {rho}")
    entries = []
    for total in range(rho + 1):
        for n1 in range(total + 1):
            for n2 in range(total - n1 + 1):
                entries.append((n1, n2, total - n1 - n2))
    # lexicographic tie-break inside each total-order block
    entries = sorted(entries, key=lambda n: (sum(n), n))
    arr = np.array(entries, dtype=np.int64)
    assert arr.shape[0] == index_count(rho)

    factorial = np.array([math.factorial(i) for i in range(2 * rho + 1)], dtype=np.float64)
    binomial = np.zeros((2 * rho + 1, 2 * rho + 1))
    for n in range(2 * rho + 1):
        for k in range(n + 1):
            binomial[n, k] = math.comb(n, k)

    lookup = {tuple(int(v) for v in row): i for i, row in enumerate(arr)}
    return MultiIndexTable(rho=rho, entries=arr, factorial=factorial,
                           binomial=binomial, _lookup=lookup)
