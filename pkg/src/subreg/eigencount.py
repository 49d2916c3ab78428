"""Counting machinery for the constant-coefficient elliptic eigenproblem.

On the unit box with Dirichlet conditions the eigenfunctions are fixed
products of sines indexed by positive integer tuples; the coefficients of
the operator only reorder them.  This module counts how many distinct
eigenvectors and eigenspaces can occur at a given spectral position, both
exactly (big-integer combinatorics) and empirically (Monte Carlo censuses
over random coefficients).
"""

import heapq
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Caps documented for the exact counting paths.
MAX_K_D2 = 10**7


@dataclass
class SpectrumOrder:
    """First k index tuples of the spectrum, ascending eigenvalue order."""

    coefficients: np.ndarray
    ordered: list

    def eigenvalue(self, tup):
        return float(sum(a * (np.pi * i) ** 2 for a, i in zip(self.coefficients, tup)))


@dataclass
class SubspaceCensus:
    """Monte Carlo census of low-energy eigenspaces over random coefficients."""

    dimension: int
    subspace_counts: Counter  # frozenset of index tuples -> occurrences
    tuple_counts: Counter  # index tuple -> occurrences across samples

    @property
    def distinct_count(self):
        return len(self.subspace_counts)


@lru_cache(maxsize=None)
def _count_rec(k, d):
    if k <= 0:
        return 0
    if d == 1:
        return k
    # Group indices i with equal floor(k / i); O(sqrt k) groups.
    total = 0
    i = 1
    while i <= k:
        q = k // i
        j = k // q
        total += (j - i + 1) * _count_rec(q, d - 1)
        i = j + 1
    return total


def count_products_leq(k, d):
    """Exact number of d-tuples of positive integers with product <= k."""
    if k < 1 or d < 1:
        raise ValueError("count_products_leq: need k >= 1 and d >= 1")
    if d == 2 and k > MAX_K_D2:
        raise ValueError(f"count_products_leq: k > {MAX_K_D2} not supported for d=2")
    return _count_rec(int(k), int(d))


def count_products_asymptotic(k, d):
    """Leading term ``k log(k)^(d-1) / (d-1)!`` of the exact count."""
    return k * math.log(k) ** (d - 1) / math.factorial(d - 1)


def _factorize(p):
    """Prime factorization by trial division; returns {prime: multiplicity}."""
    factors = {}
    n = int(p)
    for q in (2, 3):
        while n % q == 0:
            factors[q] = factors.get(q, 0) + 1
            n //= q
    q = 5
    while q * q <= n:
        for cand in (q, q + 2):
            while n % cand == 0:
                factors[cand] = factors.get(cand, 0) + 1
                n //= cand
        q += 6
    if n > 1:
        factors[n] = factors.get(n, 0) + 1
    return factors


def tau(p, d):
    """Number of ordered d-tuples of positive integers with product exactly p."""
    if p < 1:
        raise ValueError("tau: p must be >= 1")
    result = 1
    for mult in _factorize(p).values():
        result *= math.comb(mult + d - 1, mult)
    return result


def min_position(tup):
    """Product of the indices: the earliest spectral position the
    corresponding eigenvector can asymptotically occupy."""
    return math.prod(int(i) for i in tup)


def enumerate_spectrum(a, k):
    """First ``k`` index tuples ordered by eigenvalue sum(a_j (pi i_j)^2).

    Best-first lattice search: popping tuples from a heap in eigenvalue
    order is complete because every tuple dominates (coordinatewise) a
    tuple already popped, and all coefficients are positive.  Eigenvalue
    ties are broken lexicographically.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("enumerate_spectrum: coefficients must be positive")
    if k < 1:
        raise ValueError("enumerate_spectrum: k must be >= 1")
    d = a.size
    weights = a * np.pi**2

    def energy(tup):
        return float(np.dot(weights, np.asarray(tup, dtype=float) ** 2))

    start = (1,) * d
    heap = [(energy(start), start)]
    seen = {start}
    ordered = []
    while heap and len(ordered) < k:
        _, tup = heapq.heappop(heap)
        ordered.append(tup)
        for j in range(d):
            nxt = tup[:j] + (tup[j] + 1,) + tup[j + 1 :]
            if nxt not in seen:
                seen.add(nxt)
                heapq.heappush(heap, (energy(nxt), nxt))
    return SpectrumOrder(coefficients=a, ordered=ordered)


def census_position_k(d, k, n_samples, rng):
    """Distinct index tuples observed at spectral position ``k`` when the
    coefficients are sampled uniformly from (0, 1)^d."""
    if n_samples < 1:
        raise ValueError("census_position_k: need n_samples >= 1")
    observed = set()
    for _ in range(n_samples):
        a = rng.random(d)
        order = enumerate_spectrum(a, k)
        observed.add(order.ordered[k - 1])
    return observed


def census_subspaces(d, k, n_samples, rng):
    """Census of the distinct dimension-``k`` low-energy eigenspaces."""
    if n_samples < 1:
        raise ValueError("census_subspaces: need n_samples >= 1")
    subspace_counts = Counter()
    tuple_counts = Counter()
    for _ in range(n_samples):
        a = rng.random(d)
        order = enumerate_spectrum(a, k)
        members = frozenset(order.ordered)
        subspace_counts[members] += 1
        tuple_counts.update(order.ordered)
    return SubspaceCensus(
        dimension=k, subspace_counts=subspace_counts, tuple_counts=tuple_counts
    )


def greedy_augment(census, extra):
    """Distinct-subspace count after appending the ``extra`` most frequent
    tuples to every observed subspace.  Monotone non-increasing in ``extra``."""
    if extra < 0:
        raise ValueError("greedy_augment: extra must be >= 0")
    ranked = sorted(census.tuple_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top = frozenset(t for t, _ in ranked[:extra])
    return len({members | top for members in census.subspace_counts})
