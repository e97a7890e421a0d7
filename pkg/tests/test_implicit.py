import numpy as np
import pytest

from fedemd.errors import DegeneracyError
from fedemd.transport import (
    MarginalWeights,
    build_lp,
    emd_score_gradient,
    flow_jacobian,
    solve_transport,
)
from fedemd.verify import (
    is_nondegenerate,
    max_rel_err,
    random_nondegenerate_instance,
)


def uniform_marg(n):
    return MarginalWeights(np.full(n, 1.0 / n), np.full(n, 1.0 / n), "uniform")


def test_jacobian_n1_is_zero():
    cost = np.array([[0.9]])
    sol = solve_transport(cost, uniform_marg(1))
    jac = flow_jacobian(build_lp(cost, uniform_marg(1)), sol)
    assert np.max(np.abs(jac)) < 1e-6


def test_jacobian_requires_converged_solution():
    cost = np.array([[0.9]])
    sol = solve_transport(cost, uniform_marg(1))
    bad = sol.__class__(
        flow=sol.flow, nu=sol.nu, lam=sol.lam, objective=sol.objective,
        score=sol.score, iterations=sol.iterations, kkt_residual_norm=1.0,
        polished=sol.polished,
    )
    with pytest.raises(ValueError):
        flow_jacobian(build_lp(cost, uniform_marg(1)), bad)


def test_jacobian_degenerate_without_ridge_raises():
    # constant costs, uniform marginals: the polished vertex has a zero-flow
    # basic cell with zero reduced cost, so the unridged KKT matrix carries
    # an exactly zero row
    cost = np.full((2, 2), 0.5)
    marg = uniform_marg(2)
    sol = solve_transport(cost, marg)
    with pytest.raises(DegeneracyError):
        flow_jacobian(build_lp(cost, marg), sol, tol=1e-4, ridge=0.0)


def test_jacobian_matches_fd_on_nondegenerate_n2():
    rng = np.random.default_rng(0)
    found = 0
    attempts = 0
    h = 1e-5
    while found < 5 and attempts < 200:
        attempts += 1
        cost, marg = random_nondegenerate_instance(rng, 2)
        sol = solve_transport(cost, marg)
        if not is_nondegenerate(sol):
            continue
        found += 1
        jac = flow_jacobian(build_lp(cost, marg), sol)
        fd = np.zeros_like(jac)
        for col in range(4):
            up = cost.copy()
            up.ravel()[col] += h
            down = cost.copy()
            down.ravel()[col] -= h
            fd[:, col] = (
                solve_transport(up, marg).flow.ravel()
                - solve_transport(down, marg).flow.ravel()
            ) / (2 * h)
        assert max_rel_err(fd, jac) < 1e-4
    assert found == 5


def test_score_gradient_chain_matches_pipeline_fd():
    rng = np.random.default_rng(1)
    found = 0
    attempts = 0
    h = 1e-5
    while found < 8 and attempts < 400:
        attempts += 1
        n = 2 + attempts % 3
        cost, marg = random_nondegenerate_instance(rng, n)
        sol = solve_transport(cost, marg)
        if not is_nondegenerate(sol):
            continue
        found += 1
        grad = emd_score_gradient(build_lp(cost, marg), sol)
        fd = np.zeros_like(cost)
        for p in range(n):
            for q in range(n):
                up = cost.copy()
                up[p, q] += h
                down = cost.copy()
                down[p, q] -= h
                fd[p, q] = (
                    solve_transport(up, marg).score - solve_transport(down, marg).score
                ) / (2 * h)
        assert max_rel_err(fd, grad) < 1e-4
    assert found == 8


def test_emd_layer_gradient_matches_fd():
    from fedemd.tensor import Tensor, backward
    from fedemd.transport import emd_similarity
    from fedemd.verify import finite_difference_grad

    rng = np.random.default_rng(3)
    for trial in range(10):
        n = 2 + trial % 2
        u0 = rng.normal(size=(n, 3))
        v0 = rng.normal(size=(n, 3))
        u = Tensor(u0, requires_grad=True)
        v = Tensor(v0, requires_grad=True)
        backward(emd_similarity(u, v))
        fd_u = finite_difference_grad(
            lambda a: float(emd_similarity(Tensor(a), Tensor(v0)).data), u0.copy(), 1e-5
        )
        fd_v = finite_difference_grad(
            lambda a: float(emd_similarity(Tensor(u0), Tensor(a)).data), v0.copy(), 1e-5
        )
        assert max_rel_err(fd_u, u.grad) < 1e-4
        assert max_rel_err(fd_v, v.grad) < 1e-4


def test_emd_layer_forward_matches_solver_score():
    from fedemd.model import FeatureMap
    from fedemd.tensor import Tensor
    from fedemd.transport import cost_matrix, emd_similarity, marginal_weights

    rng = np.random.default_rng(4)
    u0 = rng.normal(size=(3, 4))
    v0 = rng.normal(size=(3, 4))
    out = emd_similarity(Tensor(u0), Tensor(v0))
    u_map, v_map = FeatureMap(1, 3, u0), FeatureMap(1, 3, v0)
    cost = cost_matrix(u_map, v_map)
    sol = solve_transport(cost, marginal_weights(u_map, v_map, "uniform"))
    assert float(out.data) == pytest.approx(sol.score, abs=1e-12)


def test_emd_layer_shape_validation():
    from fedemd.tensor import Tensor
    from fedemd.transport import emd_similarity

    with pytest.raises(ValueError):
        emd_similarity(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


def test_score_gradient_envelope_term_dominates():
    # at a nondegenerate vertex the flow response vanishes, leaving -flow
    rng = np.random.default_rng(2)
    while True:
        cost, marg = random_nondegenerate_instance(rng, 3)
        sol = solve_transport(cost, marg)
        if is_nondegenerate(sol):
            break
    grad = emd_score_gradient(build_lp(cost, marg), sol)
    assert np.max(np.abs(grad + sol.flow)) < 1e-5
