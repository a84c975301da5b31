"""Independent oracles used by the symbolic-regression tests."""
from __future__ import annotations

import numpy as np

from eqd.symreg import Binary, Unary, Var

_OPS = ("+", "-", "*", "/")


def _fingerprint(v: np.ndarray):
    if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > 1e12:
        return None
    return tuple(float(f"{x:.9g}") + 0.0 for x in v)


def _apply(op, a, b):
    with np.errstate(all="ignore"):
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if np.any(np.abs(b) < 1e-12):
            return None
        return a / b


def enumerate_minimal(n_vars: int, max_size: int, points: np.ndarray) -> dict:
    """Smallest constant-free tree for every function reachable within ``max_size`` nodes.

    Trees use the leaves ``Var(0..n_vars-1)`` with ``exp`` and the four
    binary operators.  Functions are identified by their values on
    ``points``; the result maps fingerprint -> (size, tree, number of
    distinct minimal trees seen).
    """
    seen: dict = {}
    by_size: list[list] = [[] for _ in range(max_size + 1)]

    def offer(size, tree, values):
        if values is None:
            return
        key = _fingerprint(values)
        if key is None:
            return
        cur = seen.get(key)
        if cur is None:
            seen[key] = [size, tree, 1]
            by_size[size].append((tree, values))
        elif cur[0] == size:
            cur[2] += 1

    for i in range(n_vars):
        offer(1, Var(i), points[:, i])
    for size in range(2, max_size + 1):
        for tree, v in by_size[size - 1]:
            with np.errstate(all="ignore"):
                offer(size, Unary("exp", tree), np.exp(v) if np.max(v) < 50 else None)
        for left in range(1, size - 1):
            right = size - 1 - left
            for lt, lv in by_size[left]:
                for rt, rv in by_size[right]:
                    for op in _OPS:
                        offer(size, Binary(op, lt, rt), _apply(op, lv, rv))
    return {k: tuple(v) for k, v in seen.items()}


def minimal_size(expr_values: np.ndarray, table: dict):
    """Size of the smallest enumerated tree matching these values, or None."""
    hit = table.get(_fingerprint(expr_values))
    return None if hit is None else hit[0]
