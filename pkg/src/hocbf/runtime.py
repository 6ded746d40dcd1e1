"""Online safety filter: one small QP per control step, RK4 integration and a
safety monitor that recomputes every chain level along stored states."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .certifier import split_affine_in_inputs
from .poly import Poly
from .system import Clif, ControlAffineSystem, ModelError, RuntimeChain, SemialgebraicSet, pad_states

log = logging.getLogger(__name__)

QP_TOL = 1e-10


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


class Termination(str, enum.Enum):
    HORIZON = "horizon"
    GOAL = "goal_reached"
    QP_INFEASIBLE = "qp_infeasible"
    DEADLOCK = "deadlock"


@dataclass
class QpInstance:
    """minimize 0.5 z'Hz + q'z subject to G z <= h, with z = (u, rho)."""

    H: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    m: int
    row_names: List[str] = field(default_factory=list)

    @property
    def n_vars(self) -> int:
        return self.H.shape[0]


@dataclass
class QpResult:
    z: np.ndarray
    lam: np.ndarray
    status: QpStatus
    iterations: int
    active: List[int]

    def u(self, m: int) -> np.ndarray:
        return self.z[:m]

    def rho(self, m: int) -> np.ndarray:
        return self.z[m:]


def kkt_residuals(qp: QpInstance, z, lam) -> Dict[str, float]:
    """Stationarity, primal/dual feasibility and complementarity, recomputed from scratch."""
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    slack = qp.h - qp.G @ z
    return {
        "stationarity": float(np.max(np.abs(qp.H @ z + qp.q + qp.G.T @ lam), initial=0.0)),
        "primal": float(np.max(-slack, initial=0.0)),
        "dual": float(np.max(-lam, initial=0.0)),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def _feasible_start(G, h, n):
    """Any point of {G z <= h} via an LP; None if the set is empty."""
    if G.shape[0] == 0:
        return np.zeros(n)
    res = linprog(np.zeros(n), A_ub=G, b_ub=h, bounds=[(None, None)] * n, method="highs")
    if res.status != 0:
        return None
    return np.asarray(res.x, dtype=float)


def _eqp(H, g, A):
    """Step p and multipliers for min 0.5 p'Hp + g'p s.t. A p = 0."""
    n = H.shape[0]
    k = A.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-g, np.zeros(k)])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve_qp(qp: QpInstance, z0: Optional[np.ndarray] = None, max_iter: int = 200) -> QpResult:
    """Primal active-set method for a strictly convex QP with Bland's anti-cycling rule.

    Entering and leaving constraints are always the lowest-index candidates, so
    the result does not depend on floating-point ties between rows.
    """
    H, q, G, h = qp.H, qp.q, qp.G, qp.h
    n, mrows = qp.n_vars, G.shape[0]
    z = _feasible_start(G, h, n) if z0 is None else np.asarray(z0, dtype=float).copy()
    if z is None:
        return QpResult(np.full(n, np.nan), np.zeros(mrows), QpStatus.INFEASIBLE, 0, [])
    scale = np.maximum(1.0, np.abs(h))
    active: List[int] = []
    for i in range(mrows):
        if abs(G[i] @ z - h[i]) <= 1e-9 * scale[i] and _independent(G, active, i):
            active.append(i)
    for it in range(max_iter):
        g = H @ z + q
        A = G[active] if active else np.zeros((0, n))
        p, mult = _eqp(H, g, A)
        if np.max(np.abs(p), initial=0.0) <= QP_TOL * max(1.0, np.max(np.abs(z), initial=0.0)):
            # H p + A'mult = -g at p = 0 is stationarity, so mult are the row multipliers
            neg = [k for k, v in enumerate(mult) if v < -QP_TOL]
            if not neg:
                z = _polish(qp, z, active)
                return QpResult(z, _multipliers(qp, z, active), QpStatus.OPTIMAL, it, sorted(active))
            leave = min((active[k] for k in neg))
            active.remove(leave)
            continue
        Gp = G @ p
        slack = h - G @ z
        alpha, block = 1.0, None
        for i in range(mrows):
            if i in active or Gp[i] <= QP_TOL * max(1.0, np.abs(G[i]).max()):
                continue
            a = max(slack[i], 0.0) / Gp[i]
            if a < alpha - 1e-15 or (block is not None and abs(a - alpha) <= 1e-15 and i < block):
                alpha, block = a, i
        z = z + alpha * p
        if block is not None:
            active.append(block)
    return QpResult(z, _multipliers(qp, z, active), QpStatus.MAX_ITERATIONS, max_iter, sorted(active))


def _independent(G, active, i, tol=1e-10) -> bool:
    if not active:
        return bool(np.any(G[i]))
    A = G[active + [i]]
    return np.linalg.matrix_rank(A, tol=tol) == len(active) + 1


def _polish(qp: QpInstance, z, active):
    """Re-solve the equality-constrained problem on the final active set."""
    n = qp.n_vars
    k = len(active)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = qp.H
    if k:
        A = qp.G[active]
        K[:n, n:] = A.T
        K[n:, :n] = A
    rhs = np.concatenate([-qp.q, qp.h[active]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    znew = sol[:n]
    if np.all(qp.G @ znew <= qp.h + 1e-12 * np.maximum(1.0, np.abs(qp.h))):
        return znew
    return z


def _multipliers(qp: QpInstance, z, active) -> np.ndarray:
    lam = np.zeros(qp.G.shape[0])
    if active:
        A = qp.G[active]
        lam_a = np.linalg.lstsq(A.T, -(qp.H @ z + qp.q), rcond=None)[0]
        lam[active] = np.maximum(lam_a, 0.0)
    return lam


# -- closed loop -----------------------------------------------------------

@dataclass
class RuntimeOptions:
    dt: float = 0.05
    horizon: float = 60.0
    slack_weight: float = 100.0
    goal_tol: float = 0.5
    u_tol: float = 1e-3
    v_tol: float = 1e-3
    deadlock_window: int = 40


@dataclass
class ClosedLoop:
    """Everything the online filter needs, in original coordinates."""

    system: ControlAffineSystem
    chains: List[RuntimeChain]
    clifs: List[Clif]
    U: SemialgebraicSet
    goal: Dict[str, float] = field(default_factory=dict)  # state name -> target
    speed: Optional[str] = None  # state used by the deadlock test
    nominal: Optional[Sequence[Poly]] = None
    options: RuntimeOptions = field(default_factory=RuntimeOptions)

    def __post_init__(self):
        sp = self.system.space
        self._input_rows = [split_affine_in_inputs(c) for c in self.U.generators]
        self._clif_lie = [(self.system.lie_f(c.V), self.system.lie_g(c.V)) for c in self.clifs]
        self._goal_idx = [sp.index(k) for k in self.goal]
        self._goal_val = np.array(list(self.goal.values()), dtype=float)
        self._speed_idx = sp.index(self.speed) if self.speed else None


def _eval(p: Poly, pt) -> float:
    return float(p.eval_many(pt)[0])


def build_qp(loop: ClosedLoop, x) -> QpInstance:
    """QP at state x: HOCBF rows, slacked CLIF rows, input rows, rho >= 0."""
    sys = loop.system
    m, K = sys.m, len(loop.clifs)
    n = m + K
    pt = pad_states(sys.space, np.asarray(x, dtype=float)[None, :])
    w = loop.options.slack_weight
    H = np.diag(np.concatenate([np.full(m, 2.0), np.full(K, 2.0 * w)]))
    uhat = np.zeros(m) if loop.nominal is None else np.array([_eval(p, pt) for p in loop.nominal])
    q = np.concatenate([-2.0 * uhat, np.zeros(K)])
    rows, rhs, names = [], [], []
    for ch in loop.chains:
        _, drift, row = ch.evaluate(x)
        if not (np.isfinite(drift) and np.all(np.isfinite(row))):
            raise ModelError(f"{ch.candidate.name}: non-finite chain value at x = {x}")
        # drift + row.u >= 0  <=>  -row.u <= drift
        rows.append(np.concatenate([-row, np.zeros(K)]))
        rhs.append(drift)
        names.append(f"hocbf[{ch.candidate.name}]")
    for k, (cl, (lf, lg)) in enumerate(zip(loop.clifs, loop._clif_lie)):
        r = np.zeros(n)
        r[:m] = [_eval(gk, pt) for gk in lg]
        r[m + k] = -1.0
        rows.append(r)
        rhs.append(-_eval(lf, pt))
        names.append(f"clif[{cl.name}]")
    for j, (c0, cks) in enumerate(loop._input_rows):
        # c0 + ck.u >= 0 with the state fixed
        r = np.zeros(n)
        r[:m] = [-_eval(ck, pt) for ck in cks]
        rows.append(r)
        rhs.append(_eval(c0, pt))
        names.append(f"input[{j}]")
    for k in range(K):
        r = np.zeros(n)
        r[m + k] = -1.0
        rows.append(r)
        rhs.append(0.0)
        names.append(f"rho[{k}]")
    G = np.array(rows, dtype=float).reshape(len(rows), n)
    return QpInstance(H, q, G, np.array(rhs, dtype=float), m, names)


def step_rk4(system: ControlAffineSystem, x, u, dt: float) -> np.ndarray:
    """Classical RK4 step with the input held constant over the step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = system.rhs(x, u)
    k2 = system.rhs(x + 0.5 * dt * k1, u)
    k3 = system.rhs(x + 0.5 * dt * k2, u)
    k4 = system.rhs(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N+1, n)
    inputs: np.ndarray  # (N+1, m); the last row repeats the final input
    slacks: np.ndarray  # (N+1, K)
    margins: np.ndarray  # (N+1, J), min over chain levels per candidate
    termination: Termination
    names: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.times)


def margins_at(loop: ClosedLoop, X) -> np.ndarray:
    """min_i psi_i^j at each state, shape (N, J)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not loop.chains:
        return np.zeros((X.shape[0], 0))
    return np.column_stack([ch.margins(X).min(axis=1) for ch in loop.chains])


def _clip_to_box(loop: ClosedLoop, u):
    """Remove round-off outside simple input bounds (hard rows are already satisfied to ~1e-12)."""
    U = loop.U
    space = loop.system.space
    out = np.array(u, dtype=float)
    for k, vi in enumerate(U.idx):
        j = vi - space.n
        if 0 <= j < out.size:
            out[j] = min(max(out[j], U.lo[k]), U.hi[k])
    return out


def simulate(loop: ClosedLoop, x0, horizon: Optional[float] = None, dt: Optional[float] = None,
             on_step: Optional[Callable] = None) -> Trajectory:
    """build_qp -> solve_qp -> RK4 until horizon, goal, deadlock or an infeasible QP."""
    opt = loop.options
    dt = opt.dt if dt is None else dt
    horizon = opt.horizon if horizon is None else horizon
    x = np.asarray(x0, dtype=float).copy()
    m0 = margins_at(loop, x)[0]
    if np.any(m0 < 0):
        bad = [ch.candidate.name for ch, v in zip(loop.chains, m0) if v < 0]
        raise ValueError(f"initial state lies outside the companion sets of {', '.join(bad)}")
    sys = loop.system
    m, K = sys.m, len(loop.clifs)
    steps = int(round(horizon / dt))
    xs, us, rhos = [x.copy()], [], []
    reason = Termination.HORIZON
    still = 0
    for k in range(steps + 1):
        if loop._goal_idx and np.linalg.norm(x[loop._goal_idx] - loop._goal_val) <= opt.goal_tol:
            reason = Termination.GOAL
            break
        if k == steps:
            break
        qp = build_qp(loop, x)
        res = solve_qp(qp)
        if res.status != QpStatus.OPTIMAL:
            reason = Termination.QP_INFEASIBLE
            break
        u = _clip_to_box(loop, res.u(m))
        us.append(u)
        rhos.append(res.rho(m))
        if on_step is not None:
            on_step(k, x, u)
        if loop._speed_idx is not None:
            small = np.linalg.norm(u) <= opt.u_tol and abs(x[loop._speed_idx]) <= opt.v_tol
            still = still + 1 if small else 0
            if still >= opt.deadlock_window:
                x = step_rk4(sys, x, u, dt)
                xs.append(x.copy())
                reason = Termination.DEADLOCK
                break
        x = step_rk4(sys, x, u, dt)
        xs.append(x.copy())
    states = np.array(xs)
    N = len(states)
    inputs = np.zeros((N, m))
    slacks = np.zeros((N, K))
    if us:
        inputs[:len(us)] = us
        inputs[len(us):] = us[-1]
        slacks[:len(rhos)] = rhos
        slacks[len(rhos):] = rhos[-1]
    times = dt * np.arange(N)
    return Trajectory(times, states, inputs, slacks, margins_at(loop, states), reason,
                      [ch.candidate.name for ch in loop.chains])


@dataclass
class SafetySummary:
    minima: Dict[str, List[float]]  # candidate -> min over time of psi_0..psi_{r-1}
    first_violation: Dict[str, Optional[int]]  # candidate -> first index with a level below -tol
    deadlock: bool
    termination: Optional[Termination]

    @property
    def safe(self) -> bool:
        return all(v is None for v in self.first_violation.values())

    @property
    def min_psi0(self) -> float:
        return min((v[0] for v in self.minima.values()), default=np.inf)


def monitor(traj: Trajectory, chains: Sequence[RuntimeChain], tol: float = 1e-3) -> SafetySummary:
    """Recompute every chain level along the stored states."""
    minima: Dict[str, List[float]] = {}
    first: Dict[str, Optional[int]] = {}
    if len(traj) == 0:
        return SafetySummary(minima, first, False, None)
    for ch in chains:
        vals = ch.margins(traj.states)
        minima[ch.candidate.name] = [float(v) for v in vals.min(axis=0)]
        # levels that held at t = 0 must keep holding
        held = vals[0] >= 0
        bad = np.nonzero(np.any(vals[:, held] < -tol, axis=1))[0] if held.any() else np.array([], dtype=int)
        first[ch.candidate.name] = int(bad[0]) if bad.size else None
    return SafetySummary(minima, first, traj.termination == Termination.DEADLOCK, traj.termination)
