"""Exact transport similarity between feature maps.

Pipeline: cosine cost matrix -> marginal weights -> balanced transport LP
solved by a primal-dual interior-point method -> similarity score
``sum((1 - c) * flow)`` -> optional implicit differentiation of the optimal
flow through the KKT system.

The LP in compact form over the flattened flow x (row-major, length n^2):

    minimize    c @ x
    subject to  G x <= h      with G = -I, h = 0          (x >= 0)
                A x  = b      row sums = supplier weights,
                              column sums = demander weights
                              (last demander row dropped: it is implied by
                              the others in a balanced problem, and dropping
                              it keeps A full row rank)

Solver: path following with a Mehrotra-style corrector, fixed centering
sigma = 0.1, fraction-to-boundary 0.995, started from the strictly interior
outer product of the marginals. Converged solutions are polished onto an
exact vertex (basis extraction + tree solve) when the optimality certificate
of that basis checks out; otherwise the raw iterate is returned. Polishing
never pivots, so it cannot mask a solver that converged to the wrong face.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegeneracyError, SolverError, warn_count
from .model import FeatureMap, ModelWeights, forward

Array = np.ndarray

ZERO_NORM_TOL = 1e-12
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
CENTERING_SIGMA = 0.1
FRACTION_TO_BOUNDARY = 0.995
KKT_RIDGE = 1e-9

MARGINAL_SCHEMES = ("uniform", "norm_proportional")


def cost_matrix(u: FeatureMap, v: FeatureMap) -> Array:
    """Pairwise cosine cost ``1 - cos(u_p, v_q)``, entries in [0, 2].

    Zero-norm rows take the orthogonal convention (cost 1.0 against
    everything) and bump the 'cost_zero_norm' warning counter.
    """
    if u.n_cells != v.n_cells or u.channels != v.channels:
        raise ValueError(
            f"feature maps disagree: {u.n_cells}x{u.channels} vs {v.n_cells}x{v.channels}"
        )
    un = np.linalg.norm(u.values, axis=1)
    vn = np.linalg.norm(v.values, axis=1)
    if np.any(un < ZERO_NORM_TOL) or np.any(vn < ZERO_NORM_TOL):
        warn_count("cost_zero_norm")
    us = u.values / np.where(un < ZERO_NORM_TOL, 1.0, un)[:, None]
    vs = v.values / np.where(vn < ZERO_NORM_TOL, 1.0, vn)[:, None]
    us[un < ZERO_NORM_TOL] = 0.0
    vs[vn < ZERO_NORM_TOL] = 0.0
    return np.clip(1.0 - us @ vs.T, 0.0, 2.0)


@dataclass(frozen=True)
class MarginalWeights:
    """Supplier / demander mass vectors; each side sums to one."""

    supplier: Array
    demander: Array
    scheme: str

    def __post_init__(self):
        for side, name in ((self.supplier, "supplier"), (self.demander, "demander")):
            if np.any(side < 0.0):
                raise ValueError(f"{name} weights must be >= 0")
            if abs(side.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} weights must sum to 1, got {side.sum()!r}")

    @property
    def n(self) -> int:
        return len(self.supplier)


def _side_weights(values: Array, scheme: str) -> Array:
    n = values.shape[0]
    if scheme == "uniform":
        return np.full(n, 1.0 / n)
    norms = np.linalg.norm(values, axis=1)
    total = norms.sum()
    if total < ZERO_NORM_TOL:
        warn_count("marginal_fallback")
        return np.full(n, 1.0 / n)
    w = norms / total
    return w / w.sum()  # renormalize round-off so the side sums to 1 exactly


def marginal_weights(u: FeatureMap, v: FeatureMap, scheme: str = "uniform") -> MarginalWeights:
    """Mass vectors for the two sides of the transport problem.

    'uniform' puts 1/n on every node; 'norm_proportional' makes each node's
    mass proportional to its embedding norm (all-zero maps fall back to
    uniform with a warning).
    """
    if scheme not in MARGINAL_SCHEMES:
        raise ValueError(f"scheme must be one of {MARGINAL_SCHEMES}, got {scheme!r}")
    return MarginalWeights(
        supplier=_side_weights(u.values, scheme),
        demander=_side_weights(v.values, scheme),
        scheme=scheme,
    )


@dataclass(frozen=True)
class LpProblem:
    """Compact-form data of the transport LP (G = -I and h = 0 are implicit)."""

    c: Array  # [n^2]
    A: Array  # [2n-1, n^2]
    b: Array  # [2n-1]
    n: int

    @property
    def G(self) -> Array:
        return -np.eye(self.n * self.n)

    @property
    def h(self) -> Array:
        return np.zeros(self.n * self.n)


def build_lp(cost: Array, marg: MarginalWeights) -> LpProblem:
    n = cost.shape[0]
    if cost.shape != (n, n) or marg.n != n:
        raise ValueError(f"cost {cost.shape} and marginals (n={marg.n}) disagree")
    if abs(marg.supplier.sum() - marg.demander.sum()) > 1e-9:
        raise ValueError("infeasible marginals: sides do not balance")
    nv = n * n
    a = np.zeros((2 * n - 1, nv))
    for p in range(n):
        a[p, p * n : (p + 1) * n] = 1.0
    for q in range(n - 1):
        a[n + q, q::n] = 1.0
    b = np.concatenate([marg.supplier, marg.demander[:-1]])
    return LpProblem(c=cost.ravel().copy(), A=a, b=b, n=n)


def kkt_residual(problem: LpProblem, x: Array, nu: Array, lam: Array) -> Array:
    """Stacked first-order residual [grad_x L; diag(lam)(Gx - h); Ax - b].

    With G = -I and h = 0 the blocks reduce to
    [c - lam + A^T nu; -lam * x; Ax - b].
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    return np.concatenate(
        [
            problem.c - lam + problem.A.T @ nu,
            -lam * x,
            problem.A @ x - problem.b,
        ]
    )


@dataclass(frozen=True)
class TransportSolution:
    """Optimal flow with duals and diagnostics from one transport solve."""

    flow: Array  # [n, n], clamped to >= 0
    nu: Array  # equality duals, [2n-1]
    lam: Array  # inequality duals, [n^2], >= 0
    objective: float
    score: float  # sum((1 - c) * flow)
    iterations: int
    kkt_residual_norm: float
    polished: bool

    @property
    def n(self) -> int:
        return self.flow.shape[0]


def _step_length(z: Array, dz: Array, fraction: float) -> float:
    neg = dz < 0.0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, fraction * np.min(-z[neg] / dz[neg])))


def _newton_direction(a, d, x, lam, m_mat, r_stat, r_eq, rhs2):
    """Solve one reduced Newton system of the path-following iteration."""
    w = d * (-r_stat) + rhs2 / lam
    rhs_nu = r_eq + a @ w
    try:
        dnu = np.linalg.solve(m_mat, rhs_nu)
    except np.linalg.LinAlgError:
        ridge = max(np.trace(m_mat), 1.0) * 1e-13
        dnu = np.linalg.solve(m_mat + ridge * np.eye(m_mat.shape[0]), rhs_nu)
    dx = w - d * (a.T @ dnu)
    dlam = (rhs2 - lam * dx) / x
    return dx, dnu, dlam


def _interior_point(problem: LpProblem, x0: Array, tol: float, max_iter: int):
    a, b, c = problem.A, problem.b, problem.c
    nv = c.size
    x = np.maximum(x0, 1e-10)  # strictly interior start
    lam = np.ones(nv)
    nu = np.zeros(a.shape[0])
    for iteration in range(1, max_iter + 1):
        resid = kkt_residual(problem, x, nu, lam)
        resid_norm = float(np.linalg.norm(resid))
        if resid_norm < tol:
            return x, nu, lam, iteration - 1, resid_norm
        r_stat = c - lam + a.T @ nu
        r_eq = a @ x - b
        comp = lam * x
        mu = comp.sum() / nv
        d = x / np.maximum(lam, 1e-300)
        m_mat = (a * d) @ a.T
        # Predictor (affine) direction feeds the second-order corrector term.
        dx_aff, _, dlam_aff = _newton_direction(a, d, x, lam, m_mat, r_stat, r_eq, -comp)
        rhs2 = CENTERING_SIGMA * mu - comp - dx_aff * dlam_aff
        dx, dnu, dlam = _newton_direction(a, d, x, lam, m_mat, r_stat, r_eq, rhs2)
        alpha_p = _step_length(x, dx, FRACTION_TO_BOUNDARY)
        alpha_d = _step_length(lam, dlam, FRACTION_TO_BOUNDARY)
        x = x + alpha_p * dx
        nu = nu + alpha_d * dnu
        lam = lam + alpha_d * dlam
    resid_norm = float(np.linalg.norm(kkt_residual(problem, x, nu, lam)))
    raise SolverError(
        f"interior point did not reach tol={tol} in {max_iter} iterations "
        f"(residual {resid_norm:.3e})",
        residual=resid_norm,
    )


class _UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> bool:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        self.parent[ri] = rj
        return True


def _crossover(cost: Array, marg: MarginalWeights, x_ip: Array):
    """Snap a converged iterate onto the exact vertex its support identifies.

    Returns (flow, nu, lam) or None when the extracted basis fails either
    feasibility or the reduced-cost optimality certificate.
    """
    n = cost.shape[0]
    order = np.argsort(-x_ip.ravel(), kind="stable")
    uf = _UnionFind(2 * n)
    cells: list[tuple[int, int]] = []
    for k in order:
        i, j = divmod(int(k), n)
        if uf.union(i, n + j):
            cells.append((i, j))
            if len(cells) == 2 * n - 1:
                break
    if len(cells) < 2 * n - 1:
        return None

    # Exact basic flows by leaf elimination on the spanning tree.
    supply = marg.supplier.astype(np.float64).copy()
    demand = marg.demander.astype(np.float64).copy()
    degree = np.zeros(2 * n, dtype=np.int64)
    incident: list[list[int]] = [[] for _ in range(2 * n)]
    for idx, (i, j) in enumerate(cells):
        degree[i] += 1
        degree[n + j] += 1
        incident[i].append(idx)
        incident[n + j].append(idx)
    flow = np.zeros((n, n))
    alive = [True] * len(cells)
    leaves = [node for node in range(2 * n) if degree[node] == 1]
    for _ in range(len(cells)):
        node = leaves.pop()
        idx = next(k for k in incident[node] if alive[k])
        i, j = cells[idx]
        q = supply[i] if node < n else demand[j]
        flow[i, j] = q
        supply[i] -= q
        demand[j] -= q
        alive[idx] = False
        other = n + j if node < n else i
        degree[other] -= 1
        degree[node] -= 1
        if degree[other] == 1:
            leaves.append(other)
    if flow.min() < -1e-7:
        return None
    flow = np.maximum(flow, 0.0)

    # Classic duals on the tree, anchored at the dropped demander constraint.
    u = np.full(n, np.nan)
    v = np.full(n, np.nan)
    v[n - 1] = 0.0
    stack = [2 * n - 1]
    adj: list[list[tuple[int, int]]] = [[] for _ in range(2 * n)]
    for i, j in cells:
        adj[i].append((n + j, i * n + j))
        adj[n + j].append((i, i * n + j))
    while stack:
        node = stack.pop()
        for nb, flat in adj[node]:
            i, j = divmod(flat, n)
            if nb < n and np.isnan(u[nb]):
                u[nb] = cost[i, j] - v[j]
                stack.append(nb)
            elif nb >= n and np.isnan(v[nb - n]):
                v[nb - n] = cost[i, j] - u[i]
                stack.append(nb)
    if np.any(np.isnan(u)) or np.any(np.isnan(v)):
        return None
    reduced = cost - u[:, None] - v[None, :]
    if reduced.min() < -1e-7:
        return None
    nu = np.concatenate([-u, -v[: n - 1]])
    lam = np.maximum(reduced, 0.0).ravel()
    lam[[i * n + j for i, j in cells]] = 0.0
    return flow, nu, lam


def solve_transport(
    cost: Array,
    marg: MarginalWeights,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    polish: bool = True,
) -> TransportSolution:
    """Minimum-cost transport plan between the two weighted node sets.

    Raises ValueError for unbalanced marginals and SolverError when the
    iteration budget runs out before the stacked KKT residual drops below
    ``tol``.
    """
    if tol <= 0.0:
        raise ValueError(f"tol must be > 0, got {tol}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    problem = build_lp(cost, marg)
    x0 = np.outer(marg.supplier, marg.demander).ravel()
    x, nu, lam, iterations, _ = _interior_point(problem, x0, tol, max_iter)
    flow = x.reshape(problem.n, problem.n)
    polished = False
    if polish:
        vertex = _crossover(cost, marg, flow)
        if vertex is not None:
            v_flow, v_nu, v_lam = vertex
            if np.sum(cost * v_flow) <= np.sum(cost * flow) + 1e-7:
                flow, nu, lam = v_flow, v_nu, v_lam
                polished = True
    flow = np.maximum(flow, 0.0)
    resid_norm = float(np.linalg.norm(kkt_residual(problem, flow.ravel(), nu, lam)))
    return TransportSolution(
        flow=flow,
        nu=nu,
        lam=lam,
        objective=float(np.sum(cost * flow)),
        score=float(np.sum((1.0 - cost) * flow)),
        iterations=iterations,
        kkt_residual_norm=resid_norm,
        polished=polished,
    )


def emd_score(cost: Array, solution: TransportSolution) -> float:
    """Similarity ``sum((1 - c_pq) * flow_pq)``; in [-1, 1] for unit mass."""
    return float(np.sum((1.0 - cost) * solution.flow))


def flow_jacobian(
    problem: LpProblem,
    solution: TransportSolution,
    tol: float = 1e-6,
    ridge: float = KKT_RIDGE,
) -> Array:
    """d(flow)/d(cost) by implicit differentiation of the KKT system.

    Solves  J = -(J_z g)^{-1} J_c g  restricted to the flow block, where z is
    the stacked primal-dual point and g the KKT residual. G, h, A, b do not
    depend on the costs, so only the stationarity block carries a right-hand
    side. Vertex solutions make the system singular in degenerate cases, so a
    ridge is added before factorization; a system that is singular even then
    raises DegeneracyError.
    """
    if solution.kkt_residual_norm >= tol:
        raise ValueError(
            f"solution residual {solution.kkt_residual_norm:.3e} not below tol={tol}"
        )
    n = problem.n
    nv = n * n
    m = problem.A.shape[0]
    size = nv + m + nv
    kkt = np.zeros((size, size))
    kkt[:nv, nv : nv + m] = problem.A.T
    kkt[:nv, nv + m :] = -np.eye(nv)
    kkt[nv : 2 * nv, :nv] = -np.diag(solution.lam)
    kkt[nv : 2 * nv, nv + m :] = -np.diag(solution.flow.ravel())
    kkt[2 * nv :, :nv] = problem.A
    kkt += ridge * np.eye(size)
    rhs = np.zeros((size, nv))
    rhs[:nv, :] = -np.eye(nv)
    try:
        full = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(
            f"KKT matrix singular at ridge={ridge}; try a larger ridge"
        ) from exc
    return full[:nv, :]


def emd_score_gradient(
    problem: LpProblem,
    solution: TransportSolution,
    ridge: float = KKT_RIDGE,
) -> Array:
    """d(score)/d(cost): envelope term plus the implicit flow response.

    grad_pq = -flow_pq + sum_kl (1 - c_kl) d(flow_kl)/d(c_pq)
    """
    n = problem.n
    jac = flow_jacobian(problem, solution, ridge=ridge)
    one_minus_c = (1.0 - problem.c).ravel()
    grad = -solution.flow.ravel() + one_minus_c @ jac
    return grad.reshape(n, n)


def emd_similarity(u, v, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """Differentiable transport similarity of two feature grids (uniform mass).

    Tensor-graph op: the forward pass solves the transport LP exactly; the
    backward pass uses the envelope gradient d(score)/d(cost) = -flow (exact
    almost everywhere, and equal to the full implicit-differentiation result
    wherever the KKT system is invertible), chained through the cosine cost
    into both feature arguments. Zero-norm rows receive zero gradient, the
    same convention that fixes their cost at 1.
    """
    from .tensor import Tensor

    u_t = u if isinstance(u, Tensor) else Tensor(u, op="emd_u")
    v_t = v if isinstance(v, Tensor) else Tensor(v, op="emd_v")
    if u_t.ndim != 2 or u_t.shape != v_t.shape:
        raise ValueError(f"feature grids must share [n, C] shape: {u_t.shape} vs {v_t.shape}")
    n = u_t.shape[0]
    u_map = FeatureMap(1, n, u_t.data)
    v_map = FeatureMap(1, n, v_t.data)
    cost = cost_matrix(u_map, v_map)
    marg = marginal_weights(u_map, v_map, "uniform")
    sol = solve_transport(cost, marg, tol=tol, max_iter=max_iter)

    un = np.linalg.norm(u_t.data, axis=1)
    vn = np.linalg.norm(v_t.data, axis=1)
    u_ok = un >= ZERO_NORM_TOL
    v_ok = vn >= ZERO_NORM_TOL
    u_hat = np.where(u_ok[:, None], u_t.data / np.where(u_ok, un, 1.0)[:, None], 0.0)
    v_hat = np.where(v_ok[:, None], v_t.data / np.where(v_ok, vn, 1.0)[:, None], 0.0)
    cos = u_hat @ v_hat.T

    def bw(g: Array) -> None:
        g_cost = -float(g) * sol.flow  # d(score)/d(cost) = -flow
        masked = g_cost * np.outer(u_ok, v_ok)
        du = -(masked @ v_hat - (masked * cos).sum(axis=1)[:, None] * u_hat)
        dv = -(masked.T @ u_hat - (masked * cos).sum(axis=0)[:, None] * v_hat)
        u_t._accum(du / np.where(u_ok, un, 1.0)[:, None])
        v_t._accum(dv / np.where(v_ok, vn, 1.0)[:, None])

    return Tensor._op_result(np.float64(sol.score), (u_t, v_t), bw, "emd_similarity")


def emd_between_models(
    local: ModelWeights,
    returned: ModelWeights,
    probe,
    scheme: str = "uniform",
    clamp: bool = True,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> float:
    """Teacher weight: batch-mean transport similarity of the two models'
    feature maps on a shared probe batch, clamped to [0, 1] unless disabled.
    """
    if local.arch != returned.arch:
        raise ConfigError(
            f"architecture mismatch: {local.arch} vs {returned.arch}"
        )
    maps_local, _ = forward(local, probe)
    maps_returned, _ = forward(returned, probe)
    scores = []
    for u, v in zip(maps_local, maps_returned):
        cost = cost_matrix(u, v)
        marg = marginal_weights(u, v, scheme)
        sol = solve_transport(cost, marg, tol=tol, max_iter=max_iter)
        scores.append(sol.score)
    mean_score = float(np.mean(scores))
    if clamp:
        return float(min(1.0, max(0.0, mean_score)))
    return mean_score
