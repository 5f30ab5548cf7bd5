"""Discrete optimal transport between two probability vectors.

`solve_exact` is a transportation simplex: north-west-corner starting basis,
tree potentials, Dantzig entering rule (most negative reduced cost, ties
broken by lexicographically smallest cell) with a switch to Bland's rule
during degenerate stretches so cycling is impossible.  Pivoting is fully
deterministic.  `solve_sinkhorn` is the entropic alternative, iterated in
the log domain and rounded back onto the transportation polytope before
reporting.

All solver arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, MarginalError, NumericError
from .ioutil import atomic_write_text

EXACT_TOL = 1e-8
SINKHORN_TOL = 1e-6


@dataclass
class TransportPlan:
    plan: np.ndarray  # (n, m) float64, >= 0
    source: np.ndarray  # alpha
    target: np.ndarray  # beta
    objective: float
    solver_tag: str

    def feasibility_tolerance(self) -> float:
        return SINKHORN_TOL if self.solver_tag.startswith("sinkhorn") else EXACT_TOL

    def to_csv(self) -> str:
        lines = ["row,col,mass"]
        for i, j in np.argwhere(self.plan > 0):
            lines.append(f"{i},{j},{self.plan[i, j]!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())


@dataclass
class FeasibilityReport:
    max_row_violation: float
    max_col_violation: float
    min_entry: float
    min_entry_index: tuple[int, int]
    tolerance: float
    passed: bool


def _validate_inputs(alpha, beta, cost):
    a = np.asarray(alpha, dtype=np.float64).ravel()
    b = np.asarray(beta, dtype=np.float64).ravel()
    c = np.asarray(cost, dtype=np.float64)
    if c.shape != (a.size, b.size):
        raise MarginalError(f"cost shape {c.shape} does not match marginals ({a.size}, {b.size})")
    if (a < 0).any() or (b < 0).any():
        raise MarginalError("marginals must be non-negative")
    if abs(a.sum() - 1.0) > 1e-7 or abs(b.sum() - 1.0) > 1e-7:
        raise MarginalError(f"marginals must each sum to 1 (got {a.sum()!r}, {b.sum()!r})")
    if not np.all(np.isfinite(c)):
        raise NumericError("cost matrix contains non-finite entries")
    return a, b, c


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    """Feasible staircase start: exactly n+m-1 basic cells forming a tree."""
    n, m = a.size, b.size
    plan = np.zeros((n, m), dtype=np.float64)
    basis: list[tuple[int, int]] = []
    ra, rb = a.copy(), b.copy()
    i = j = 0
    for _ in range(n + m - 1):
        t = min(ra[i], rb[j])
        plan[i, j] = t
        basis.append((i, j))
        ra[i] -= t
        rb[j] -= t
        if j == m - 1 and i == n - 1:
            break
        if j == m - 1:
            i += 1
        elif i == n - 1:
            j += 1
        elif ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return plan, basis


def _potentials(n: int, m: int, basis: list[tuple[int, int]], cost: np.ndarray):
    """Solve u_i + v_j = C_ij over the basis tree (root u_0 = 0)."""
    adj: dict[int, list[tuple[int, float]]] = {k: [] for k in range(n + m)}
    for i, j in basis:
        adj[i].append((n + j, cost[i, j]))
        adj[n + j].append((i, cost[i, j]))
    u = np.zeros(n)
    v = np.zeros(m)
    seen = np.zeros(n + m, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        node = stack.pop()
        for nbr, cij in adj[node]:
            if seen[nbr]:
                continue
            seen[nbr] = True
            if node < n:  # row -> col
                v[nbr - n] = cij - u[node]
            else:  # col -> row
                u[nbr] = cij - v[node - n]
            stack.append(nbr)
    if not seen.all():
        raise NumericError("basis does not span the bipartite graph")
    return u, v


def _tree_cycle(n: int, basis: list[tuple[int, int]], entering: tuple[int, int]):
    """Alternating cycle closed by the entering cell: [+, -, +, -, ...]."""
    adj: dict[int, list[tuple[int, tuple[int, int]]]] = {}
    for i, j in basis:
        adj.setdefault(i, []).append((n + j, (i, j)))
        adj.setdefault(n + j, []).append((i, (i, j)))
    start, goal = n + entering[1], entering[0]
    parent: dict[int, tuple[int, tuple[int, int]]] = {start: (-1, (-1, -1))}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nbr, cell in adj.get(node, []):
            if nbr not in parent:
                parent[nbr] = (node, cell)
                stack.append(nbr)
    cells = [entering]
    node = goal
    while node != start:
        prev, cell = parent[node]
        cells.append(cell)
        node = prev
    return cells  # even length; odd positions give up flow


def solve_exact(alpha, beta, cost, max_pivots: int | None = None) -> TransportPlan:
    """Optimal plan of the transportation LP.

    Zero-mass rows/columns are dropped before solving and reinserted as zero
    slices, keeping the simplex basis non-degenerate at the boundary.
    """
    a_full, b_full, c_full = _validate_inputs(alpha, beta, cost)
    rows = np.flatnonzero(a_full > 0.0)
    cols = np.flatnonzero(b_full > 0.0)
    a, b, c = a_full[rows], b_full[cols], c_full[np.ix_(rows, cols)]
    n, m = a.size, b.size

    plan, basis = _northwest_corner(a, b)
    in_basis = np.zeros((n, m), dtype=bool)
    for cell in basis:
        in_basis[cell] = True

    scale = max(1.0, float(np.abs(c).max()) if c.size else 1.0)
    enter_tol = 1e-11 * scale
    if max_pivots is None:
        max_pivots = 2000 * (n + m) + 20000

    degenerate_run = 0  # consecutive zero-flow pivots; Bland mode above 20
    for _ in range(max_pivots):
        u, v = _potentials(n, m, basis, c)
        reduced = c - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        if degenerate_run < 20:
            flat = int(reduced.argmin())  # Dantzig; argmin is lex smallest on ties
            if reduced.flat[flat] >= -enter_tol:
                break
            entering = (flat // m, flat % m)
        else:
            candidates = np.argwhere(reduced < -enter_tol)
            if candidates.size == 0:
                break
            entering = (int(candidates[0][0]), int(candidates[0][1]))  # Bland
        cycle = _tree_cycle(n, basis, entering)
        gives = cycle[1::2]
        theta = min(plan[cell] for cell in gives)
        leaving = min(cell for cell in gives if plan[cell] == theta)
        degenerate_run = degenerate_run + 1 if theta == 0.0 else 0
        for k, cell in enumerate(cycle):
            plan[cell] += theta if k % 2 == 0 else -theta
        plan[leaving] = 0.0
        basis.remove(leaving)
        basis.append(entering)
        in_basis[leaving] = False
        in_basis[entering] = True
    else:
        raise NumericError(f"transportation simplex did not terminate in {max_pivots} pivots")

    np.clip(plan, 0.0, None, out=plan)
    full = np.zeros_like(c_full)
    full[np.ix_(rows, cols)] = plan
    objective = float((full * c_full).sum())
    return TransportPlan(full, a_full, b_full, objective, "exact")


def _logsumexp(mat: np.ndarray, axis: int) -> np.ndarray:
    mx = mat.max(axis=axis, keepdims=True)
    out = np.log(np.exp(mat - mx).sum(axis=axis, keepdims=True)) + mx
    return np.squeeze(out, axis=axis)


def _round_to_polytope(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Altschuler-style rounding: scale rows, scale columns, then spread the residual."""
    row = plan.sum(axis=1)
    plan = plan * np.minimum(1.0, np.divide(a, row, out=np.ones_like(a), where=row > 0))[:, None]
    col = plan.sum(axis=0)
    plan = plan * np.minimum(1.0, np.divide(b, col, out=np.ones_like(b), where=col > 0))[None, :]
    ea = np.clip(a - plan.sum(axis=1), 0.0, None)
    eb = np.clip(b - plan.sum(axis=0), 0.0, None)
    total = ea.sum()
    if total > 0:
        plan = plan + np.outer(ea, eb) / total
    return plan


def solve_sinkhorn(alpha, beta, cost, epsilon: float, max_iter: int = 5000, tol: float = 1e-9) -> TransportPlan:
    """Entropic plan via log-domain scaling iterations.

    Converges when both marginal violations drop below `tol`; the reported
    plan and objective come from the rounded-feasible plan.
    """
    if epsilon <= 0:
        raise MarginalError("epsilon must be positive")
    a_full, b_full, c_full = _validate_inputs(alpha, beta, cost)
    rows = np.flatnonzero(a_full > 0.0)
    cols = np.flatnonzero(b_full > 0.0)
    a, b, c = a_full[rows], b_full[cols], c_full[np.ix_(rows, cols)]

    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    plan = None
    converged = False
    row_res = col_res = np.inf
    for it in range(max_iter):
        f = epsilon * (log_a - _logsumexp((g[None, :] - c) / epsilon, axis=1))
        g = epsilon * (log_b - _logsumexp((f[:, None] - c) / epsilon, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - c) / epsilon)
        row_res = float(np.abs(plan.sum(axis=1) - a).max())
        col_res = float(np.abs(plan.sum(axis=0) - b).max())
        if row_res < tol and col_res < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"sinkhorn did not converge in {max_iter} iterations", row_res, col_res)

    plan = _round_to_polytope(plan, a, b)
    full = np.zeros_like(c_full)
    full[np.ix_(rows, cols)] = plan
    objective = float((full * c_full).sum())
    return TransportPlan(full, a_full, b_full, objective, f"sinkhorn(eps={epsilon})")


def check_plan(plan: TransportPlan) -> FeasibilityReport:
    """Marginal residuals and the most negative entry, judged at the solver's tolerance."""
    tol = plan.feasibility_tolerance()
    row_violation = float(np.abs(plan.plan.sum(axis=1) - plan.source).max())
    col_violation = float(np.abs(plan.plan.sum(axis=0) - plan.target).max())
    flat_idx = int(plan.plan.argmin())
    idx = np.unravel_index(flat_idx, plan.plan.shape)
    min_entry = float(plan.plan[idx])
    passed = row_violation <= tol and col_violation <= tol and min_entry >= 0.0
    return FeasibilityReport(row_violation, col_violation, min_entry, (int(idx[0]), int(idx[1])), tol, passed)
