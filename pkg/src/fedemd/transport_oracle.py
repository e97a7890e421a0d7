"""Independent reference solvers for the balanced transport problem.

Two deliberately different routes from the production interior-point solver:

* ``transportation_simplex`` — north-west-corner start, MODI duals, stepping
  stone pivots. Exact vertex arithmetic; the optimality certificate
  (non-negative reduced costs) is checked before returning.
* ``assignment_enumeration`` — brute force over permutation matrices, valid
  for uniform marginals where the transport polytope's vertices are the
  permutation matrices scaled by 1/n.

Both are used only by tests and the verify suites; the protocol never calls
them.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

Array = np.ndarray

_EPS = 1e-11


@dataclass
class OracleSolution:
    flow: Array  # [m, n]
    objective: float
    basis: list  # list of (i, j) basic cells, m + n - 1 of them
    pivots: int


def _northwest_corner(supply: Array, demand: Array) -> tuple[Array, list]:
    m, n = len(supply), len(demand)
    flow = np.zeros((m, n))
    basis: list[tuple[int, int]] = []
    a = supply.astype(np.float64).copy()
    b = demand.astype(np.float64).copy()
    i = j = 0
    while len(basis) < m + n - 1:
        q = min(a[i], b[j])
        flow[i, j] = q
        basis.append((i, j))
        a[i] -= q
        b[j] -= q
        if len(basis) == m + n - 1:
            break
        # Move along the exhausted side; ties keep a zero-flow basic cell.
        if a[i] <= b[j] and i < m - 1:
            i += 1
        else:
            j += 1
    return flow, basis


def _tree_adjacency(basis: list, m: int, n: int) -> list[list[int]]:
    """Bipartite adjacency over nodes 0..m-1 (rows) and m..m+n-1 (cols)."""
    adj: list[list[int]] = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    return adj


def _duals(cost: Array, basis: list, m: int, n: int) -> tuple[Array, Array]:
    """Solve u_i + v_j = c_ij on the basis tree, anchored at u_0 = 0."""
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    adj = _tree_adjacency(basis, m, n)
    u[0] = 0.0
    stack = [0]
    while stack:
        node = stack.pop()
        for nb in adj[node]:
            if node < m and np.isnan(v[nb - m]):
                v[nb - m] = cost[node, nb - m] - u[node]
                stack.append(nb)
            elif node >= m and np.isnan(u[nb]):
                u[nb] = cost[nb, node - m] - v[node - m]
                stack.append(nb)
    if np.any(np.isnan(u)) or np.any(np.isnan(v)):
        raise RuntimeError("basis does not span the transport graph")
    return u, v


def _cycle(basis: list, enter: tuple[int, int], m: int, n: int) -> list:
    """Alternating cycle closed by the entering cell: tree path col->row."""
    adj = _tree_adjacency(basis, m, n)
    src, dst = enter[0], m + enter[1]
    parent = {dst: -1}
    stack = [dst]
    while stack:
        node = stack.pop()
        if node == src:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                stack.append(nb)
    path = [src]
    while path[-1] != dst:
        path.append(parent[path[-1]])
    cells = [enter]
    for a, b in zip(path, path[1:]):
        i, j = (a, b - m) if a < m else (b, a - m)
        cells.append((i, j))
    return cells  # alternating +,-,+,- starting at the entering cell


def transportation_simplex(
    cost: Array,
    supply: Array,
    demand: Array,
    max_pivots: int = 10000,
) -> OracleSolution:
    """Exact optimum of the balanced transportation problem.

    Entering variable: most negative reduced cost (lexicographic tie-break);
    after 500 pivots it falls back to Bland's rule to rule out cycling.
    Raises if supplies and demands are unbalanced or optimality cannot be
    certified within ``max_pivots``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    m, n = cost.shape
    if abs(supply.sum() - demand.sum()) > 1e-9:
        raise ValueError("unbalanced transport problem")
    flow, basis = _northwest_corner(supply, demand)
    pivots = 0
    while True:
        u, v = _duals(cost, basis, m, n)
        reduced = cost - u[:, None] - v[None, :]
        for i, j in basis:
            reduced[i, j] = 0.0
        if pivots < 500:
            enter_flat = int(np.argmin(reduced))
            enter = (enter_flat // n, enter_flat % n)
            best = reduced[enter]
        else:  # Bland: first improving cell in row-major order
            enter, best = None, 0.0
            for i in range(m):
                for j in range(n):
                    if reduced[i, j] < -_EPS:
                        enter, best = (i, j), reduced[i, j]
                        break
                if enter is not None:
                    break
            if enter is None:
                best = 0.0
        if best >= -_EPS:
            break
        if pivots >= max_pivots:
            raise RuntimeError(f"transportation simplex exceeded {max_pivots} pivots")
        cells = _cycle(basis, enter, m, n)
        minus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leave = min(c for c in minus if flow[c] <= theta + _EPS)
        for k, c in enumerate(cells):
            flow[c] += theta if k % 2 == 0 else -theta
        flow[leave] = 0.0
        basis.remove(leave)
        basis.append(enter)
        pivots += 1
    flow = np.maximum(flow, 0.0)
    return OracleSolution(
        flow=flow,
        objective=float(np.sum(cost * flow)),
        basis=sorted(basis),
        pivots=pivots,
    )


def assignment_enumeration(cost: Array) -> float:
    """Optimal objective under uniform marginals by permutation enumeration."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    rows = np.arange(n)
    best = min(float(cost[rows, perm].sum()) for perm in permutations(range(n)))
    return best / n
