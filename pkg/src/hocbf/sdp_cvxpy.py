"""Optional delegate that hands an :class:`~hocbf.sdp.SdpProblem` to cvxpy.

Used as an independent cross-check of the native interior-point solver. cvxpy
is an optional dependency (``pip install artifact[cvxpy]``).
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import sdp


def solve_cvxpy(problem: sdp.SdpProblem, settings: Optional[sdp.Settings] = None,
                solver: Optional[str] = None) -> sdp.SdpSolution:
    import cvxpy as cp  # optional

    settings = settings or sdp.Settings()
    m = problem.n_rows
    Xs = [cp.Variable((n, n), symmetric=True) for n in problem.block_dims]
    xf = cp.Variable(problem.n_free) if problem.n_free else None
    xl = cp.Variable(problem.n_nonneg) if problem.n_nonneg else None
    expr = 0
    for X, (r, i, j, v) in zip(Xs, problem.block_entries):
        if not r.size:
            continue
        n = X.shape[0]
        # each (i, j) entry multiplies X[i, j] once; use the upper-triangle vectorization
        cols = i * n + j
        A = sp.csr_matrix((v, (r, cols)), shape=(m, n * n))
        expr = expr + A @ cp.vec(X, order="C")
    if xf is not None:
        expr = expr + problem.A_free @ xf
    if xl is not None:
        expr = expr + problem.A_nonneg @ xl
    cons = [expr == problem.b] + [X >> 0 for X in Xs]
    if xl is not None:
        cons.append(xl >= 0)
    obj = 0
    for X, (i, j, v) in zip(Xs, problem.c_blocks):
        for a, b_, w in zip(i, j, v):
            obj = obj + w * X[a, b_]
    if xf is not None and np.any(problem.c_free):
        obj = obj + problem.c_free @ xf
    if xl is not None and np.any(problem.c_nonneg):
        obj = obj + problem.c_nonneg @ xl
    prob = cp.Problem(cp.Minimize(obj), cons)
    try:
        prob.solve(solver=solver or cp.CLARABEL)
        raw = prob.status
    except cp.SolverError:
        raw = "solver_error"
    status = {
        cp.OPTIMAL: sdp.Status.OPTIMAL, cp.OPTIMAL_INACCURATE: sdp.Status.FEASIBLE,
        cp.INFEASIBLE: sdp.Status.INFEASIBLE, cp.INFEASIBLE_INACCURATE: sdp.Status.INFEASIBLE,
        cp.UNBOUNDED: sdp.Status.UNBOUNDED, cp.UNBOUNDED_INACCURATE: sdp.Status.UNBOUNDED,
    }.get(raw, sdp.Status.NUMERICAL_ERROR)
    if status not in (sdp.Status.OPTIMAL, sdp.Status.FEASIBLE):
        blocks = [np.zeros((n, n)) for n in problem.block_dims]
        return sdp.SdpSolution(status, blocks, np.zeros(problem.n_free), np.zeros(problem.n_nonneg), np.zeros(m),
                               blocks, np.zeros(problem.n_nonneg), 0, {})
    blocks = [np.asarray(X.value) for X in Xs]
    free = np.asarray(xf.value) if xf is not None else np.zeros(0)
    nonneg = np.asarray(xl.value) if xl is not None else np.zeros(0)
    y = -np.asarray(cons[0].dual_value).ravel()
    dual_blocks = [np.asarray(c.dual_value) for c in cons[1:1 + len(Xs)]]
    dual_nonneg = np.asarray(cons[-1].dual_value) if xl is not None else np.zeros(0)
    metrics = sdp.residuals(problem, blocks, free, nonneg)
    stats = prob.solver_stats
    return sdp.SdpSolution(status, blocks, free, nonneg, y, dual_blocks, dual_nonneg,
                           int(stats.num_iters or 0), metrics)
