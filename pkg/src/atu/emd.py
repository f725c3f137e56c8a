"""Earth Mover's Distance between equal-size point sets.

The optimal bijection is found exactly with a shortest-augmenting-path
Hungarian solver (O(n^3)). The differentiable form holds the optimal matching
fixed and differentiates the matched pair distances, which is exact wherever
the optimal assignment is locally constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mean, norm, take

__all__ = [
    "Assignment",
    "solve_assignment",
    "solve_assignment_batch",
    "pairwise_distances",
    "emd_sets",
    "emd_diff",
    "emd_diff_batch",
    "fps",
]


@dataclass(frozen=True)
class Assignment:
    """``permutation[j]`` is the column matched to row ``j``."""

    permutation: np.ndarray
    cost: float


def solve_assignment(cost) -> Assignment:
    """Minimum-cost perfect matching of a square cost matrix."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    n = c.shape[0]
    if n == 0:
        raise ValueError("cost matrix is empty")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")

    # Potentials u (rows) and v (columns); column 0 is a virtual root.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.int64)
    perm[match[1:] - 1] = np.arange(n)
    total = float(c[np.arange(n), perm].sum())
    return Assignment(perm, total)


def solve_assignment_batch(costs) -> np.ndarray:
    """Optimal permutations for a stack of square cost matrices ``(T, n, n)``.

    Runs the same augmenting-path search as :func:`solve_assignment` on all
    problems in lockstep; problems whose path is complete sit idle.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 3 or c.shape[1] != c.shape[2]:
        raise ValueError(f"expected a (T, n, n) stack of cost matrices, got shape {c.shape}")
    t, n, _ = c.shape
    if n == 0 or t == 0:
        raise ValueError("cost matrices are empty")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")

    u = np.zeros((t, n + 1))
    v = np.zeros((t, n + 1))
    match = np.zeros((t, n + 1), dtype=np.int64)
    way = np.zeros((t, n + 1), dtype=np.int64)
    for i in range(1, n + 1):
        match[:, 0] = i
        j0 = np.zeros(t, dtype=np.int64)
        minv = np.full((t, n + 1), np.inf)
        used = np.zeros((t, n + 1), dtype=bool)
        act = np.arange(t)
        while len(act):
            used[act, j0[act]] = True
            i0 = match[act, j0[act]]
            free = ~used[act, 1:]
            reduced = c[act, i0 - 1] - u[act, i0][:, None] - v[act, 1:]
            mv = minv[act, 1:]
            better = free & (reduced < mv)
            mv = np.where(better, reduced, mv)
            way[act, 1:] = np.where(better, j0[act][:, None], way[act, 1:])
            cand = np.where(free, mv, np.inf)
            j1 = np.argmin(cand, axis=1) + 1
            delta = cand[np.arange(len(act)), j1 - 1]
            rr, cc = np.nonzero(used[act])
            u[act[rr], match[act[rr], cc]] += delta[rr]
            v[act] -= np.where(used[act], delta[:, None], 0.0)
            minv[act, 1:] = np.where(free, mv - delta[:, None], mv)
            j0[act] = j1
            act = act[match[act, j1] != 0]
        # flip the augmenting paths
        act = np.arange(t)
        while len(act):
            j1 = way[act, j0[act]]
            match[act, j0[act]] = match[act, j1]
            j0[act] = j1
            act = act[j1 != 0]

    perm = np.empty((t, n), dtype=np.int64)
    rows = np.repeat(np.arange(t), n)
    perm[rows, (match[:, 1:] - 1).reshape(-1)] = np.tile(np.arange(n), t)
    return perm


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise ValueError(f"a point set must be a non-empty (n, d) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("point set has non-finite coordinates")
    return a


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"EMD needs equal-size sets, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"EMD needs equal dimensions, got {a.shape[1]} and {b.shape[1]}")


def emd_sets(a, b) -> tuple[float, Assignment]:
    """Mean matched Euclidean distance under the optimal bijection."""
    a, b = _as_points(a), _as_points(b)
    _check_pair(a, b)
    asg = solve_assignment(pairwise_distances(a, b))
    return asg.cost / len(a), asg


def emd_diff(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable EMD with the optimal matching held fixed."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    pa, pb = _as_points(a.data), _as_points(b.data)
    _check_pair(pa, pb)
    if a.ndim == 1:
        a, b = a.reshape(-1, 1), b.reshape(-1, 1)
    perm = solve_assignment(pairwise_distances(pa, pb)).permutation
    return mean(norm(a - take(b, perm), axis=-1))


def emd_diff_batch(a: Tensor, b: Tensor) -> Tensor:
    """Per-item EMD for stacked sets ``(T, n, d)``; returns a ``(T,)`` tensor."""
    if a.ndim != 3 or a.shape != b.shape:
        raise ValueError(f"expected two (T, n, d) stacks of equal shape, got {a.shape}, {b.shape}")
    t, n, _ = a.shape
    diff = a.data[:, :, None, :] - b.data[:, None, :, :]
    perms = solve_assignment_batch(np.sqrt(np.einsum("tijk,tijk->tij", diff, diff)))
    matched = take(b, (np.arange(t)[:, None], perms))
    return mean(norm(a - matched, axis=-1), axis=1)


def fps(points, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    p = _as_points(points)
    n = len(p)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    dmin = np.linalg.norm(p - p[seed_index], axis=1)
    dmin[seed_index] = -1.0
    for m in range(1, k):
        j = int(np.argmax(dmin))
        chosen[m] = j
        dmin = np.minimum(dmin, np.linalg.norm(p - p[j], axis=1))
        dmin[chosen[: m + 1]] = -1.0
    return chosen
