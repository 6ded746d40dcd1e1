import numpy as np
import pytest

from hocbf import sdp
from hocbf.sdp import SdpBuilder, Status, residuals, solve

TOL = sdp.Settings().tol_feas


def analytic_problem():
    """min x  s.t.  [[x, 1], [1, x]] psd, optimum x* = 1."""
    B = SdpBuilder()
    k = B.add_block(2)
    f = B.add_free(1)[0]
    B.add_row(0.0, [(k, 0, 0, 1.0)], [(f, -1.0)])
    B.add_row(0.0, [(k, 1, 1, 1.0)], [(f, -1.0)])
    B.add_row(1.0, [(k, 0, 1, 1.0)])
    B.set_objective(free_terms=[(f, 1.0)])
    return B.build()


def known_solution_problem(rng, dims=(3, 5, 2), m=24):
    """Random SDP built around a strictly complementary primal-dual pair."""
    B = SdpBuilder()
    ks = [B.add_block(n) for n in dims]
    fr = B.add_free(2)
    nn = B.add_nonneg(3)
    Xs, Zs = [], []
    for n in dims:
        Q = np.linalg.qr(rng.normal(size=(n, n)))[0]
        r = n // 2
        lx = np.r_[rng.uniform(1, 2, r), np.zeros(n - r)]
        lz = np.r_[np.zeros(r), rng.uniform(1, 2, n - r)]
        Xs.append(Q @ np.diag(lx) @ Q.T)
        Zs.append(Q @ np.diag(lz) @ Q.T)
    xf = rng.normal(size=2)
    xl, zl = np.array([1.0, 0.0, 2.0]), np.array([0.0, 1.0, 0.0])
    y = rng.normal(size=m)
    cb, cf, cl = {}, np.zeros(2), zl.copy()
    for _ in range(m):
        bt = [(k, i, j, rng.normal()) for k, n in zip(ks, dims) for i in range(n) for j in range(i, n)]
        ft = [(q, rng.normal()) for q in fr]
        nt = [(q, rng.normal()) for q in nn]
        rhs = sum(v * Xs[k][i, j] for k, i, j, v in bt) + sum(v * xf[q] for q, v in ft) + sum(v * xl[q] for q, v in nt)
        B.add_row(rhs, bt, ft, nt)
        yr = y[_]
        for k, i, j, v in bt:
            cb[(k, i, j)] = cb.get((k, i, j), 0.0) + v * yr
        for q, v in ft:
            cf[q] += v * yr
        for q, v in nt:
            cl[q] += v * yr
    # C = A^T y + Z; an upper entry (i < j) pairs with both symmetric positions
    for k, n in zip(ks, dims):
        for i in range(n):
            for j in range(i, n):
                cb[(k, i, j)] = cb.get((k, i, j), 0.0) + (Zs[k][i, j] if i == j else 2 * Zs[k][i, j])
    B.set_objective([(k, i, j, v) for (k, i, j), v in cb.items()], list(enumerate(cf)), list(enumerate(cl)))
    return B.build(), Xs, xf, xl


def infeasible_problem():
    # X = -1 for a 1x1 psd block
    B = SdpBuilder()
    k = B.add_block(1)
    B.add_row(-1.0, [(k, 0, 0, 1.0)])
    return B.build()


def test_analytic():
    s = solve(analytic_problem())
    assert s.status == Status.OPTIMAL
    assert abs(s.free[0] - 1.0) <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_recovers_known_solution(seed):
    P, Xs, xf, xl = known_solution_problem(np.random.default_rng(seed))
    s = solve(P, tol_feas=1e-9, tol_gap=1e-9)
    assert s.status == Status.OPTIMAL
    assert max(np.abs(X - Y).max() for X, Y in zip(s.blocks, Xs)) <= 1e-6
    assert np.abs(s.free - xf).max() <= 1e-6
    assert np.abs(s.nonneg - xl).max() <= 1e-6


def test_infeasible():
    assert solve(infeasible_problem()).status == Status.INFEASIBLE


@pytest.mark.parametrize("seed", range(5))
def test_optimal_metrics_confirmed_independently(seed):
    P, *_ = known_solution_problem(np.random.default_rng(100 + seed))
    s = solve(P)
    assert s.status == Status.OPTIMAL
    r = residuals(P, s.blocks, s.free, s.nonneg, y=s.y)
    st = sdp.Settings()
    assert r["relative_primal_residual"] <= 10 * st.tol_feas
    assert r["min_block_eig"] >= -10 * st.tol_feas
    assert r["dual_residual"] <= 10 * st.tol_feas
    assert r["duality_gap"] <= 10 * st.tol_gap


@pytest.mark.parametrize("seed", range(20))
def test_scaling_invariance(seed):
    rng = np.random.default_rng(200 + seed)
    P, *_ = known_solution_problem(rng, dims=(3, 2), m=10)
    a, c = rng.uniform(0.2, 5.0, size=2)
    s1, s2 = solve(P), solve(P.scaled(a, c))
    assert s1.status == s2.status == Status.OPTIMAL
    assert s2.objective == pytest.approx(c * s1.objective, rel=1e-6, abs=1e-6)


def test_deterministic():
    P, *_ = known_solution_problem(np.random.default_rng(7))
    a, b = solve(P), solve(P)
    assert a.iterations == b.iterations and a.status == b.status
    assert all(np.array_equal(x, y) for x, y in zip(a.blocks, b.blocks))


def test_cvxpy_backend_agrees():
    pytest.importorskip("cvxpy")
    from hocbf.sdp_cvxpy import solve_cvxpy
    s = solve_cvxpy(analytic_problem())
    assert s.status in (Status.OPTIMAL, Status.FEASIBLE)
    assert abs(s.free[0] - 1.0) <= 1e-5
    assert solve_cvxpy(infeasible_problem()).status == Status.INFEASIBLE
