"""Minimum-cost one-to-one assignment with forbidden (infinite) cells."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np


def _lsa(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian for n <= m; returns the column of each row."""
    n, m = cost.shape
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _solve(cost: np.ndarray) -> Tuple[int, float, List[Tuple[int, int]]]:
    """Max number of finite matches, then min total cost. Returns (count, cost, pairs)."""
    n, m = cost.shape
    finite = np.isfinite(cost)
    if n == 0 or m == 0 or not finite.any():
        return 0, 0.0, []
    big = 1.0 + 2.0 * float(np.abs(cost[finite]).sum())
    work = np.where(finite, cost, big)
    transposed = n > m
    if transposed:
        work = work.T
    cols = _lsa(work)
    pairs = []
    for r, c in enumerate(cols):
        i, j = (c, r) if transposed else (r, c)
        if c >= 0 and finite[i, j]:
            pairs.append((int(i), int(j)))
    pairs.sort()
    return len(pairs), float(sum(cost[i, j] for i, j in pairs)), pairs


def hungarian(cost) -> List[Tuple[int, int]]:
    """Optimal partial assignment over finite cells of an n x m cost matrix.

    Maximizes the number of assigned pairs, then minimizes total cost. Among
    optimal assignments the lexicographically smallest one wins, comparing
    each row's column in row order with "unassigned" ranked last.
    """
    C = np.array(cost, dtype=np.float64)
    if C.size == 0:
        return []
    if C.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {C.shape}")
    if np.isnan(C).any() or np.isneginf(C).any():
        raise ValueError("cost matrix may contain finite values and +inf only")
    n, m = C.shape
    best_count, best_cost, base = _solve(C)
    if best_count == 0:
        return []
    tol = 1e-9 * (1.0 + abs(best_cost))

    fixed: List[Tuple[int, int]] = []
    fixed_cost = 0.0
    used_cols: set = set()
    for i in range(n):
        rest_rows = list(range(i + 1, n))
        options: List[Optional[int]] = [j for j in range(m) if j not in used_cols and np.isfinite(C[i, j])]
        options.append(None)
        chosen = False
        for j in options:
            cols = [c for c in range(m) if c not in used_cols and c != j]
            sub = C[np.ix_(rest_rows, cols)] if rest_rows and cols else np.zeros((0, 0))
            cnt, sc, _ = _solve(sub)
            extra = 0.0 if j is None else C[i, j]
            cnt += len(fixed) + (j is not None)
            if cnt == best_count and fixed_cost + extra + sc <= best_cost + tol:
                if j is not None:
                    fixed.append((i, j))
                    used_cols.add(j)
                    fixed_cost += extra
                chosen = True
                break
        if not chosen:  # numerical corner case: fall back to the unrefined optimum
            return base
    return fixed


def assignment_cost(cost, pairs: Sequence[Tuple[int, int]]) -> float:
    C = np.asarray(cost, dtype=np.float64)
    return float(sum(C[i, j] for i, j in sorted(pairs)))
