import itertools

import numpy as np
import pytest

from hocbf import scenario
from hocbf.poly import VarSpace
from hocbf.runtime import (ClosedLoop, QpInstance, QpStatus, Termination, build_qp, kkt_residuals, monitor,
                           simulate, solve_qp, step_rk4)
from hocbf.system import (ClassKSlot, ClassKTemplate, ControlAffineSystem, RuntimeChain)

# one RK4 step of xdot = x with h = 0.1: 1 + h + h^2/2 + h^3/6 + h^4/24
RK4_GROWTH = 1.1051708333333333


def enumerate_qp(qp):
    """Exhaustive active-set enumeration: the KKT point whose active set is feasible and dual feasible."""
    n, rows = qp.n_vars, qp.G.shape[0]
    for k in range(min(n, rows) + 1):
        for S in itertools.combinations(range(rows), k):
            A = qp.G[list(S)]
            K = np.block([[qp.H, A.T], [A, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-qp.q, qp.h[list(S)]]))
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:n], sol[n:]
            if np.all(qp.G @ z <= qp.h + 1e-9) and np.all(lam >= -1e-9):
                return z
    return None


def random_qp(rng, trial):
    n = int(rng.integers(1, 6))
    rows = int(rng.integers(1, 8))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    G = rng.normal(size=(rows, n))
    z0 = rng.normal(size=n)
    h = G @ z0 + rng.uniform(0, 1, rows)
    if trial % 5 == 0:  # duplicated row, degenerate for the working set
        G, h = np.vstack([G, G[:1]]), np.concatenate([h, h[:1]])
    return QpInstance(H, rng.normal(size=n), G, h, n)


def test_qp_kkt_and_enumeration_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(500):
        qp = random_qp(rng, trial)
        res = solve_qp(qp)
        assert res.status == QpStatus.OPTIMAL
        worst = max(worst, max(kkt_residuals(qp, res.z, res.lam).values()))
        ref = enumerate_qp(qp)
        assert ref is not None
        assert np.abs(ref - res.z).max() <= 1e-7
    assert worst <= 1e-8


def test_qp_infeasible():
    qp = QpInstance(np.eye(1) * 2, np.zeros(1), np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]), 1)
    assert solve_qp(qp).status == QpStatus.INFEASIBLE


def test_qp_unconstrained_minimum():
    qp = QpInstance(np.diag([2.0, 4.0]), np.array([-2.0, 4.0]), np.zeros((0, 2)), np.zeros(0), 2)
    assert np.allclose(solve_qp(qp).z, [1.0, -1.0])


def test_rk4_growth_factor():
    S = VarSpace(["x"], ["u"])
    sys = ControlAffineSystem(S, [S.var("x")], [[S.zero()]])
    x = np.array([1.0])
    for _ in range(10):
        nxt = step_rk4(sys, x, np.zeros(1), 0.1)
        assert abs(nxt[0] / x[0] - RK4_GROWTH) <= 1e-9
        x = nxt


def _di_loop(gains=(0.5, 0.5)):
    sc = scenario.load("double_integrator")
    cand = sc.candidates[0].with_slots([ClassKSlot(ClassKTemplate.linear(a)) for a in gains])
    chains = [RuntimeChain(cand, sc.system)]
    return sc, ClosedLoop(sc.system, chains, list(sc.clifs), sc.U, sc.goal, sc.speed, sc.nominal(),
                          sc.runtime_options())


def test_build_qp_rows():
    sc, loop = _di_loop()
    qp = build_qp(loop, np.array([0.5, -0.2]))
    assert qp.row_names == ["hocbf[wall]", "clif[V]", "input[0]", "input[1]", "rho[0]"]
    # hocbf: u + a1 x2 + a2 (x2 + a1 x1) >= 0
    assert qp.G[0, 0] == pytest.approx(-1.0)
    assert qp.h[0] == pytest.approx(0.5 * -0.2 + 0.5 * (-0.2 + 0.5 * 0.5))


def test_closed_loop_safe_and_in_box():
    sc, loop = _di_loop()
    for x0 in sc.initial_conditions():
        tr = simulate(loop, x0)
        assert tr.termination in (Termination.GOAL, Termination.HORIZON, Termination.DEADLOCK)
        assert np.all(tr.inputs >= -1.0) and np.all(tr.inputs <= 1.0)
        summ = monitor(tr, loop.chains)
        assert summ.safe and summ.min_psi0 >= -1e-3


def test_wall_approach_is_stopped():
    sc, loop = _di_loop((1.0, 1.0))
    loop.nominal = None
    loop.clifs = []
    loop.__post_init__()
    loop.options.horizon = 10.0
    tr = simulate(loop, np.array([1.0, -0.5]))
    assert tr.states[:, 0].min() >= -1e-3
    assert np.all(np.abs(tr.inputs) <= 1.0)


def test_outside_companion_set_rejected():
    sc, loop = _di_loop()
    with pytest.raises(ValueError, match="companion"):
        simulate(loop, np.array([0.1, -1.5]))


def test_simulation_deterministic():
    sc, loop = _di_loop()
    x0 = sc.initial_conditions()[1]
    a, b = simulate(loop, x0), simulate(loop, x0)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.inputs, b.inputs)
