import numpy as np
import pytest

from capmkt.qp import QPInfeasibleError, QPNonconvexError, solve_qp


def projected_gradient(P, q, lb, ub, iters=200_000):
    """Brute-force oracle: long-run projected gradient descent."""
    L = float(np.linalg.eigvalsh(P)[-1])
    x = np.clip(np.zeros(len(q)), lb, ub)
    for _ in range(iters):
        x = np.clip(x - (P @ x + q) / L, lb, ub)
    return x


def test_box_example():
    # minimize (x-3)^2 on [0, 2] -> x = 2
    res = solve_qp(np.array([[2.0]]), np.array([-6.0]), lb=[0.0], ub=[2.0])
    assert res.x[0] == pytest.approx(2.0, abs=1e-12)
    assert res.kkt_residual <= 1e-8


def test_unconstrained_closed_form():
    P = np.diag([2.0, 6.0, 4.0])
    q = np.array([-2.0, -3.0, 8.0])
    res = solve_qp(P, q)
    assert np.allclose(res.x, -q / np.diag(P), atol=1e-12)
    assert res.kkt_residual <= 1e-12


def test_random_qps_match_projected_gradient():
    rng = np.random.default_rng(3)
    for _ in range(6):
        n = 20
        M = rng.normal(size=(n, n))
        P = M @ M.T + 0.5 * np.eye(n)
        q = rng.normal(size=n) * 3
        lb = -1 - rng.random(n)
        ub = 1 + rng.random(n)
        res = solve_qp(P, q, lb=lb, ub=ub)
        ref = projected_gradient(P, q, lb, ub)
        assert np.max(np.abs(res.x - ref)) <= 1e-6
        assert res.kkt_residual <= 1e-8


def test_equality_and_inequality_duals():
    # min x1^2 + x2^2 s.t. x1 + x2 >= 2: solution (1, 1), dual 2
    res = solve_qp(2 * np.eye(2), np.zeros(2), A_in=[[-1.0, -1.0]], b_in=[-2.0])
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-10)
    assert res.ineq_duals[0] == pytest.approx(2.0, abs=1e-8)


def test_infeasible_certificate():
    with pytest.raises(QPInfeasibleError) as err:
        solve_qp(np.array([[2.0]]), np.zeros(1), A_in=[[1.0], [-1.0]],
                 b_in=[0.0, -1.0])
    assert err.value.row is not None


def test_nonconvex_rejected():
    with pytest.raises(QPNonconvexError):
        solve_qp(np.array([[-2.0]]), np.zeros(1), lb=[0.0], ub=[1.0])
    with pytest.raises(QPNonconvexError):
        solve_qp(np.array([[1.0, 3.0], [3.0, 1.0]]), np.zeros(2),
                 lb=[-1, -1], ub=[1, 1])


def test_deterministic_repeat():
    rng = np.random.default_rng(11)
    n = 12
    M = rng.normal(size=(n, n))
    P = M @ M.T + np.eye(n)
    q = rng.normal(size=n)
    A_in = rng.normal(size=(5, n))
    b_in = rng.random(5)
    r1 = solve_qp(P, q, lb=np.zeros(n), ub=np.ones(n), A_in=A_in, b_in=b_in)
    r2 = solve_qp(P, q, lb=np.zeros(n), ub=np.ones(n), A_in=A_in, b_in=b_in)
    assert np.array_equal(r1.x, r2.x)
    assert r1.active_set == r2.active_set
