"""Dense numerics shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Randomness comes
from ``numpy.random.Generator`` driven by PCG64, seeded from a 64-bit integer;
PCG64's output stream is fixed by numpy's compatibility policy and its state
round-trips through ``bit_generator.state``.

Permutations are integer vectors ``p`` with the convention that output index
``i`` takes input index ``p[i]``, so permuting the rows of ``W`` is ``W[p]``.
"""
from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_tensor(x) -> np.ndarray:
    """Convert to a float64 array and check every entry is finite."""
    t = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains NaN or Inf")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x) -> np.ndarray:
    """Logistic function, evaluated without overflow for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x) -> np.ndarray:
    s = sigmoid(x)
    return s * sigmoid(-np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------- permutations


def check_permutation(p) -> np.ndarray:
    p = np.asarray(p)
    if p.ndim != 1 or not np.issubdtype(p.dtype, np.integer):
        raise ValueError("permutation must be a 1-d integer array")
    if not np.array_equal(np.sort(p), np.arange(len(p))):
        raise ValueError("mapping is not a bijection")
    return p.astype(np.int64)


def identity_permutation(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


def invert_permutation(p) -> np.ndarray:
    p = np.asarray(p)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p), dtype=p.dtype)
    return inv


def compose_permutations(p, q) -> np.ndarray:
    """Permutation equal to applying ``q`` first, then ``p``.

    ``apply_permutation_rows(apply_permutation_rows(t, q), p)`` equals
    ``apply_permutation_rows(t, compose_permutations(p, q))``.
    """
    return np.asarray(q)[np.asarray(p)]


def permutation_matrix(p) -> np.ndarray:
    """Matrix ``P`` with ``P @ x == x[p]``."""
    p = np.asarray(p)
    m = np.zeros((len(p), len(p)))
    m[np.arange(len(p)), p] = 1.0
    return m


def apply_permutation_rows(t: np.ndarray, p) -> np.ndarray:
    t = np.asarray(t)
    if t.shape[0] != len(p):
        raise DimensionError(f"permutation of length {len(p)} on axis of extent {t.shape[0]}")
    return t[np.asarray(p)]


def apply_permutation_cols(t: np.ndarray, p) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 2 or t.shape[1] != len(p):
        raise DimensionError(f"permutation of length {len(p)} on columns of {t.shape}")
    return t[:, np.asarray(p)]


# ------------------------------------------------------------------ assignment


def lap_solve(cost, maximize: bool = False) -> tuple[np.ndarray, float]:
    """Solve the square linear assignment problem.

    Shortest augmenting path with dual potentials (Jonker-Volgenant family,
    in the single-row-at-a-time form described by Crouse, 2016). Each row is
    inserted by a Dijkstra search over reduced costs; the inner scan over
    columns is vectorized.

    Returns ``(mapping, value)`` where row ``i`` is assigned column
    ``mapping[i]`` and ``value = sum(cost[i, mapping[i]])``. Among tied
    columns the search prefers an unassigned one, then the lowest index.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    work = -c if maximize else c
    # shift so reduced costs start nonnegative; does not change the argmin
    work = work - work.min()

    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)

    for cur_row in range(n):
        shortest = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.int64)
        visited_rows = np.zeros(n, dtype=bool)
        visited_cols = np.zeros(n, dtype=bool)
        i = cur_row
        min_val = 0.0
        sink = -1
        while sink < 0:
            visited_rows[i] = True
            open_cols = ~visited_cols
            reduced = min_val + work[i] - u[i] - v
            better = open_cols & (reduced < shortest)
            path[better] = i
            shortest[better] = reduced[better]

            cand = np.where(open_cols, shortest, np.inf)
            low = cand.min()
            ties = np.flatnonzero(cand == low)
            free = ties[row4col[ties] < 0]
            j = int(free[0] if len(free) else ties[0])
            min_val = float(low)
            visited_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])

        u[cur_row] += min_val
        others = visited_rows.copy()
        others[cur_row] = False
        rows = np.flatnonzero(others)
        u[rows] += min_val - shortest[col4row[rows]]
        v[visited_cols] -= min_val - shortest[visited_cols]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur_row:
                break

    value = float(c[np.arange(n), col4row].sum())
    return col4row, value
