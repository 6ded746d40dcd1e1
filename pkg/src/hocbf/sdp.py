"""Dense primal-dual interior-point solver for small semidefinite programs.

Standard form::

    minimize    <C, X> + c_f . x_f + c_l . x_l
    subject to  A(X) + A_f x_f + A_l x_l = b
                X_k PSD,  x_l >= 0,  x_f free

Block variables are addressed by their upper-triangle entries (i <= j); an
equality coefficient on entry (i, j) multiplies ``X[i, j]`` once, so an
off-diagonal coefficient ``a`` corresponds to the symmetric matrix with
``a/2`` in both (i, j) and (j, i).

The solver runs a homogeneous self-dual embedding with Nesterov-Todd scaling
and a Mehrotra predictor-corrector. Free variables are kept in an augmented
Schur system instead of being split.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)


class SdpError(ValueError):
    """Structurally malformed problem."""


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITERATIONS = "MaxIterations"
    NUMERICAL_ERROR = "NumericalError"


@dataclass
class Settings:
    tol_feas: float = 1e-7
    tol_gap: float = 1e-7
    tol_infeas: float = 1e-8
    max_iter: int = 200
    step_fraction: float = 0.98
    # stalled runs may still return a primal point at this looser tolerance
    tol_feas_loose: float = 1e-6
    stall_iters: int = 10
    refine_steps: int = 4
    verbose: bool = False


@dataclass
class SdpProblem:
    """Standard-form SDP. Build with :class:`SdpBuilder` or directly."""

    block_dims: List[int]
    n_free: int
    n_nonneg: int
    b: np.ndarray
    # per block: (rows, i, j, vals) with i <= j
    block_entries: List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    A_free: sp.csr_matrix
    A_nonneg: sp.csr_matrix
    c_blocks: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    c_free: Optional[np.ndarray] = None
    c_nonneg: Optional[np.ndarray] = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        m = self.b.size
        if self.c_free is None:
            self.c_free = np.zeros(self.n_free)
        if self.c_nonneg is None:
            self.c_nonneg = np.zeros(self.n_nonneg)
        if not self.c_blocks:
            empty = np.zeros(0, dtype=int)
            self.c_blocks = [(empty, empty, np.zeros(0)) for _ in self.block_dims]
        self.validate(m)

    @property
    def n_rows(self) -> int:
        return self.b.size

    @property
    def n_vars(self) -> int:
        return sum(n * (n + 1) // 2 for n in self.block_dims) + self.n_free + self.n_nonneg

    def validate(self, m: Optional[int] = None):
        m = self.b.size if m is None else m
        if len(self.block_entries) != len(self.block_dims) or len(self.c_blocks) != len(self.block_dims):
            raise SdpError("block data does not match block_dims")
        if any(n < 1 for n in self.block_dims):
            raise SdpError("block dimensions must be >= 1")
        if self.A_free.shape != (m, self.n_free) or self.A_nonneg.shape != (m, self.n_nonneg):
            raise SdpError("scalar constraint matrices have the wrong shape")
        if self.c_free.shape != (self.n_free,) or self.c_nonneg.shape != (self.n_nonneg,):
            raise SdpError("objective vectors have the wrong shape")
        touched = np.zeros(m, dtype=bool)
        for n, (r, i, j, v) in zip(self.block_dims, self.block_entries):
            if r.size and (r.min() < 0 or r.max() >= m):
                raise SdpError("row index out of range")
            if i.size and (np.any(i > j) or i.min() < 0 or j.max() >= n):
                raise SdpError("block entries must satisfy 0 <= i <= j < n")
            touched[r[v != 0]] = True
        for M in (self.A_free, self.A_nonneg):
            coo = M.tocoo()
            touched[coo.row[coo.data != 0]] = True
        if m and not touched.all():
            raise SdpError(f"equality row {int(np.argmin(touched))} references no variable")
        for n, (i, j, v) in zip(self.block_dims, self.c_blocks):
            if i.size and (np.any(i > j) or j.max() >= n):
                raise SdpError("objective block entries must satisfy i <= j < n")

    def scaled(self, row_scale: float, obj_scale: float) -> "SdpProblem":
        """Copy with every equality row multiplied by ``row_scale`` and the objective by ``obj_scale``."""
        return SdpProblem(
            list(self.block_dims), self.n_free, self.n_nonneg, self.b * row_scale,
            [(r, i, j, v * row_scale) for r, i, j, v in self.block_entries],
            (self.A_free * row_scale).tocsr(), (self.A_nonneg * row_scale).tocsr(),
            [(i, j, v * obj_scale) for i, j, v in self.c_blocks],
            self.c_free * obj_scale, self.c_nonneg * obj_scale,
        )


class SdpBuilder:
    """Incremental construction of an :class:`SdpProblem`."""

    def __init__(self):
        self.block_dims: List[int] = []
        self._entries: List[List[Tuple[int, int, int, float]]] = []
        self._cblk: List[Dict[Tuple[int, int], float]] = []
        self.n_free = 0
        self.n_nonneg = 0
        self._free: List[Tuple[int, int, float]] = []
        self._nonneg: List[Tuple[int, int, float]] = []
        self.c_free: List[float] = []
        self.c_nonneg: List[float] = []
        self.b: List[float] = []

    def add_block(self, n: int) -> int:
        if n < 1:
            raise SdpError("block dimension must be >= 1")
        self.block_dims.append(n)
        self._entries.append([])
        self._cblk.append({})
        return len(self.block_dims) - 1

    def add_free(self, count: int = 1) -> List[int]:
        ids = list(range(self.n_free, self.n_free + count))
        self.n_free += count
        self.c_free.extend([0.0] * count)
        return ids

    def add_nonneg(self, count: int = 1) -> List[int]:
        ids = list(range(self.n_nonneg, self.n_nonneg + count))
        self.n_nonneg += count
        self.c_nonneg.extend([0.0] * count)
        return ids

    def add_row(self, rhs: float, block_terms=(), free_terms=(), nonneg_terms=()) -> int:
        """Append ``sum(terms) = rhs``; block terms are (block, i, j, coeff)."""
        r = len(self.b)
        self.b.append(float(rhs))
        for k, i, j, v in block_terms:
            if i > j:
                i, j = j, i
            self._entries[k].append((r, i, j, float(v)))
        for k, v in free_terms:
            self._free.append((r, k, float(v)))
        for k, v in nonneg_terms:
            self._nonneg.append((r, k, float(v)))
        return r

    def set_objective(self, block_terms=(), free_terms=(), nonneg_terms=()):
        for k, i, j, v in block_terms:
            if i > j:
                i, j = j, i
            d = self._cblk[k]
            d[(i, j)] = d.get((i, j), 0.0) + float(v)
        for k, v in free_terms:
            self.c_free[k] += float(v)
        for k, v in nonneg_terms:
            self.c_nonneg[k] += float(v)

    def build(self) -> SdpProblem:
        m = len(self.b)
        entries = []
        for ent in self._entries:
            if ent:
                arr = np.array(ent, dtype=float)
                entries.append((arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int), arr[:, 3]))
            else:
                z = np.zeros(0, dtype=int)
                entries.append((z, z, z, np.zeros(0)))

        def csr(trip, ncol):
            if not trip:
                return sp.csr_matrix((m, ncol))
            a = np.array(trip, dtype=float)
            return sp.csr_matrix((a[:, 2], (a[:, 0].astype(int), a[:, 1].astype(int))), shape=(m, ncol))

        cblocks = []
        for d in self._cblk:
            if d:
                keys = list(d)
                cblocks.append((np.array([k[0] for k in keys]), np.array([k[1] for k in keys]),
                                np.array([d[k] for k in keys])))
            else:
                z = np.zeros(0, dtype=int)
                cblocks.append((z, z, np.zeros(0)))
        return SdpProblem(list(self.block_dims), self.n_free, self.n_nonneg, np.array(self.b), entries,
                          csr(self._free, self.n_free), csr(self._nonneg, self.n_nonneg), cblocks,
                          np.array(self.c_free), np.array(self.c_nonneg))


@dataclass
class SdpSolution:
    status: Status
    blocks: List[np.ndarray]
    free: np.ndarray
    nonneg: np.ndarray
    y: np.ndarray
    dual_blocks: List[np.ndarray]
    dual_nonneg: np.ndarray
    iterations: int
    metrics: Dict[str, float]

    @property
    def objective(self) -> float:
        return self.metrics["primal_objective"]

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.FEASIBLE)


# -- helpers -------------------------------------------------------------------


def _sym_from_entries(n, i, j, v, scale_offdiag=0.5) -> np.ndarray:
    M = np.zeros((n, n))
    diag = i == j
    np.add.at(M, (i[diag], j[diag]), v[diag])
    off = ~diag
    np.add.at(M, (i[off], j[off]), scale_offdiag * v[off])
    np.add.at(M, (j[off], i[off]), scale_offdiag * v[off])
    return M


def svec_upper(X: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(X.shape[0])
    return X[iu]


def row_norms(problem: SdpProblem) -> np.ndarray:
    """Max-abs coefficient of every equality row."""
    m = problem.n_rows
    out = np.zeros(m)
    for r, _, _, v in problem.block_entries:
        if r.size:
            np.maximum.at(out, r, np.abs(v))
    for M in (problem.A_free, problem.A_nonneg):
        coo = M.tocoo()
        if coo.nnz:
            np.maximum.at(out, coo.row, np.abs(coo.data))
    return out


def apply_A(problem: SdpProblem, blocks: Sequence[np.ndarray], free, nonneg) -> np.ndarray:
    out = problem.A_free @ np.asarray(free, dtype=float) + problem.A_nonneg @ np.asarray(nonneg, dtype=float)
    out = np.asarray(out, dtype=float).ravel()
    for (r, i, j, v), X in zip(problem.block_entries, blocks):
        if r.size:
            np.add.at(out, r, v * X[i, j])
    return out


def _min_eig(X: np.ndarray) -> float:
    if X.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(0.5 * (X + X.T))[0])


def objective_value(problem: SdpProblem, blocks, free, nonneg) -> float:
    val = float(problem.c_free @ free + problem.c_nonneg @ nonneg)
    for (i, j, v), X in zip(problem.c_blocks, blocks):
        if v.size:
            val += float(np.sum(v * X[i, j]))
    return val


def residuals(problem: SdpProblem, blocks: Sequence[np.ndarray], free=None, nonneg=None,
              y: Optional[np.ndarray] = None, normalize: bool = True) -> Dict[str, float]:
    """Recompute feasibility metrics for candidate primal (and optional dual) values.

    With ``normalize`` every equality row (and its right-hand side) is divided
    by the row's max-abs coefficient before the residual is measured.
    """
    free = np.zeros(problem.n_free) if free is None else np.asarray(free, dtype=float)
    nonneg = np.zeros(problem.n_nonneg) if nonneg is None else np.asarray(nonneg, dtype=float)
    if len(blocks) != len(problem.block_dims) or free.shape != (problem.n_free,) or nonneg.shape != (problem.n_nonneg,):
        raise SdpError("candidate shape does not match problem")
    for X, n in zip(blocks, problem.block_dims):
        if X.shape != (n, n):
            raise SdpError("candidate block has the wrong shape")
    scale = np.ones(problem.n_rows)
    if normalize:
        rn = row_norms(problem)
        scale = np.where(rn > 0, 1.0 / np.where(rn > 0, rn, 1.0), 1.0)
    r = (apply_A(problem, blocks, free, nonneg) - problem.b) * scale
    out = {
        "primal_residual": float(np.max(np.abs(r))) if r.size else 0.0,
        "min_block_eig": min((_min_eig(X) for X in blocks), default=0.0),
        "min_nonneg": float(nonneg.min()) if nonneg.size else 0.0,
        "primal_objective": objective_value(problem, blocks, free, nonneg),
    }
    bn = problem.b * scale
    out["relative_primal_residual"] = float(np.max(np.abs(r) / (1.0 + np.abs(bn)))) if r.size else 0.0
    if y is not None:
        ys = np.asarray(y, dtype=float)
        dual_obj = float(problem.b @ ys)
        dres = 0.0
        cmax = max([np.max(np.abs(problem.c_free), initial=0.0), np.max(np.abs(problem.c_nonneg), initial=0.0)]
                   + [np.max(np.abs(v), initial=0.0) for _, _, v in problem.c_blocks])
        # S = C - A^T y must lie in the dual cone; free part must vanish
        for n, (r, i, j, v), (ci, cj, cv) in zip(problem.block_dims, problem.block_entries, problem.c_blocks):
            S = _sym_from_entries(n, ci, cj, cv) - _sym_from_entries(n, i, j, v * ys[r])
            dres = max(dres, max(0.0, -_min_eig(S)))
        sf = problem.c_free - problem.A_free.T @ ys
        if sf.size:
            dres = max(dres, float(np.max(np.abs(sf))))
        sl = problem.c_nonneg - problem.A_nonneg.T @ ys
        if sl.size:
            dres = max(dres, max(0.0, float(-sl.min())))
        out["dual_objective"] = dual_obj
        out["dual_residual"] = dres / (1.0 + cmax)
        po = out["primal_objective"]
        out["duality_gap"] = abs(po - dual_obj) / (1.0 + abs(po) + abs(dual_obj))
    return out


# -- the interior-point method --------------------------------------------------


class _Data:
    """Dense, equilibrated copy of the problem used inside the iteration."""

    def __init__(self, problem: SdpProblem):
        m = problem.n_rows
        rn = row_norms(problem)
        self.row_scale = 1.0 / np.where(rn > 0, rn, 1.0)
        self.m = m
        self.dims = list(problem.block_dims)
        self.rows: List[np.ndarray] = []
        self.A: List[np.ndarray] = []  # (m_k, n, n) symmetric slices
        self.C: List[np.ndarray] = []
        for n, (r, i, j, v), (ci, cj, cv) in zip(self.dims, problem.block_entries, problem.c_blocks):
            rows = np.unique(r)
            loc = np.searchsorted(rows, r)
            Ak = np.zeros((rows.size, n, n))
            vs = v * self.row_scale[r]
            diag = i == j
            np.add.at(Ak, (loc[diag], i[diag], j[diag]), vs[diag])
            off = ~diag
            np.add.at(Ak, (loc[off], i[off], j[off]), 0.5 * vs[off])
            np.add.at(Ak, (loc[off], j[off], i[off]), 0.5 * vs[off])
            self.rows.append(rows)
            self.A.append(Ak)
            self.C.append(_sym_from_entries(n, ci, cj, cv))
        D = sp.diags(self.row_scale)
        self.Al = np.asarray((D @ problem.A_nonneg).todense()).reshape(m, problem.n_nonneg)
        self.Af = np.asarray((D @ problem.A_free).todense()).reshape(m, problem.n_free)
        self.cl = problem.c_nonneg.astype(float).copy()
        self.cf = problem.c_free.astype(float).copy()
        self.b = problem.b * self.row_scale
        cmax = max([np.max(np.abs(self.cl), initial=0.0), np.max(np.abs(self.cf), initial=0.0)]
                   + [np.max(np.abs(C), initial=0.0) for C in self.C])
        self.obj_scale = 1.0 / cmax if cmax > 0 else 1.0
        self.cl *= self.obj_scale
        self.cf *= self.obj_scale
        self.C = [C * self.obj_scale for C in self.C]
        self.nl = self.cl.size
        self.nf = self.cf.size
        self.nu = sum(self.dims) + self.nl  # barrier degree
        self.components = _row_components(self)
        where = np.empty(m, dtype=np.int64)
        pos = np.empty(m, dtype=np.int64)
        for ci, c in enumerate(self.components):
            where[c] = ci
            pos[c] = np.arange(c.size)
        self.block_comp = []
        for rows in self.rows:
            if rows.size:
                self.block_comp.append((int(where[rows[0]]), pos[rows]))
            else:
                self.block_comp.append((0, rows))

    def A_op(self, Xs, xl, xf) -> np.ndarray:
        out = self.Al @ xl + self.Af @ xf
        for rows, Ak, X in zip(self.rows, self.A, Xs):
            if rows.size:
                out[rows] += Ak.reshape(rows.size, -1) @ X.ravel()
        return out

    def AT_op(self, y):
        Ss = []
        for rows, Ak, n in zip(self.rows, self.A, self.dims):
            if rows.size:
                Ss.append((y[rows] @ Ak.reshape(rows.size, -1)).reshape(n, n))
            else:
                Ss.append(np.zeros((n, n)))
        return Ss, self.Al.T @ y, self.Af.T @ y

    def inner_c(self, Xs, xl, xf) -> float:
        return float(sum(np.sum(C * X) for C, X in zip(self.C, Xs)) + self.cl @ xl + self.cf @ xf)


def _nt_scaling(X: np.ndarray, Z: np.ndarray):
    """Return (G, lam) with G^T Z G = G^{-1} X G^{-T} = diag(lam)."""
    L = np.linalg.cholesky(X)
    R = np.linalg.cholesky(Z)
    U, s, Vt = np.linalg.svd(R.T @ L)
    G = L @ Vt.T / np.sqrt(s)
    return G, s


def _max_step_psd(lam: np.ndarray, D: np.ndarray) -> float:
    """Largest a with diag(lam) + a*D PSD (D symmetric, in scaled coordinates)."""
    isq = 1.0 / np.sqrt(lam)
    T = D * isq[:, None] * isq[None, :]
    ev = np.linalg.eigvalsh(0.5 * (T + T.T))[0]
    return np.inf if ev >= 0 else -1.0 / ev


def _max_step_lp(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def _row_components(d: "_Data") -> List[np.ndarray]:
    """Groups of rows coupled through a shared PSD block or nonnegative variable."""
    parent = np.arange(d.m)

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union_all(rows):
        if len(rows) < 2:
            return
        r0 = find(rows[0])
        for r in rows[1:]:
            rr = find(r)
            if rr != r0:
                parent[rr] = r0

    for rows in d.rows:
        union_all(list(rows))
    for col in range(d.nl):
        union_all(list(np.nonzero(d.Al[:, col])[0]))
    roots = np.array([find(r) for r in range(d.m)])
    order = np.argsort(roots, kind="stable")
    splits = np.nonzero(np.diff(roots[order]))[0] + 1
    return [np.sort(g) for g in np.split(order, splits)] if d.m else []


class _Kkt:
    """Factorized reduced Newton system for one iteration.

    M = A H A^T is block diagonal over row components; each block is factored
    on its own and free variables are eliminated through a small Schur system.
    """

    def __init__(self, d: "_Data", Ws, hl):
        self.d = d
        comps = d.components
        Ms = [np.zeros((c.size, c.size)) for c in comps]
        for rows, Ak, W, (ci, loc) in zip(d.rows, d.A, Ws, d.block_comp):
            if not rows.size:
                continue
            WAW = np.matmul(np.matmul(W, Ak), W)
            Mk = Ak.reshape(rows.size, -1) @ WAW.reshape(rows.size, -1).T
            Ms[ci][np.ix_(loc, loc)] += Mk
        if d.nl:
            for c, M in zip(comps, Ms):
                Alc = d.Al[c]
                M += (Alc * hl) @ Alc.T
        self.dense = None
        top = max((np.abs(np.diag(M)).max(initial=0.0) for M in Ms), default=0.0)
        # a component with an identically zero M (rows touching only free variables)
        # cannot be regularized relative to its own scale
        flat = any(M.size and not np.abs(np.diag(M)).max() > 0.0 for M in Ms)
        if d.nf and flat:
            # M is singular (e.g. rows that touch only free variables), so eliminate
            # nothing and factor the quasi-definite regularized saddle system instead
            m = d.Af.shape[0]
            K = np.zeros((m + d.nf, m + d.nf))
            for c, M in zip(comps, Ms):
                K[np.ix_(c, c)] = 0.5 * (M + M.T)
            K[:m, m:] = d.Af
            K[m:, :m] = d.Af.T
            delta = 1e-12 * max(top, np.abs(d.Af).max(initial=0.0), 1e-300)
            self.K = K
            self.dense = sla.lu_factor(K + np.diag(np.r_[np.full(m, delta), np.full(d.nf, -delta)]),
                                       check_finite=False)
            return
        self.facs = [self._factor(0.5 * (M + M.T)) for M in Ms]
        if d.nf:
            MiAf = self.solve_M(d.Af)
            S = d.Af.T @ MiAf
            S = 0.5 * (S + S.T)
            try:
                self.S = ("lu", sla.lu_factor(S, check_finite=False))
            except (np.linalg.LinAlgError, ValueError):
                self.S = ("pinv", np.linalg.pinv(S))
            self.MiAf = MiAf

    @staticmethod
    def _factor(M):
        m = M.shape[0]
        base = max(np.abs(np.diag(M)).max(initial=0.0), 1e-300)
        reg = 0.0
        for _ in range(6):
            try:
                return ("chol", sla.cho_factor(M + reg * np.eye(m), lower=True, check_finite=False))
            except np.linalg.LinAlgError:
                reg = base * 1e-14 if reg == 0.0 else reg * 100
        w, V = np.linalg.eigh(M)
        return ("eig", (np.maximum(w, base * 1e-14), V))

    def solve_M(self, rhs):
        out = np.empty_like(rhs, dtype=float)
        for c, (kind, fac) in zip(self.d.components, self.facs):
            r = rhs[c]
            if kind == "chol":
                out[c] = sla.cho_solve(fac, r, check_finite=False)
            else:
                w, V = fac
                out[c] = V @ ((V.T @ r) / (w if r.ndim == 1 else w[:, None]))
        return out

    def solve(self, p1, p2):
        """Solve [[M, Af], [Af^T, 0]] [dy; dxf] = [p1; p2]."""
        d = self.d
        if not d.nf:
            return self.solve_M(p1), np.zeros(0)
        if self.dense is not None:
            rhs = np.concatenate([p1, p2])
            sol = sla.lu_solve(self.dense, rhs, check_finite=False)
            for _ in range(2):
                sol = sol + sla.lu_solve(self.dense, rhs - self.K @ sol, check_finite=False)
            return sol[:p1.shape[0]], sol[p1.shape[0]:]
        Mp = self.solve_M(p1)
        rhs = d.Af.T @ Mp - p2
        kind, fac = self.S
        dxf = sla.lu_solve(fac, rhs, check_finite=False) if kind == "lu" else fac @ rhs
        dy = Mp - self.MiAf @ dxf
        return dy, dxf


def solve(problem: SdpProblem, settings: Optional[Settings] = None, **overrides) -> SdpSolution:
    """Solve a standard-form SDP; numerical trouble is reported as a status."""
    st = settings or Settings()
    if overrides:
        st = Settings(**{**st.__dict__, **overrides})
    problem.validate()
    d = _Data(problem)
    m = d.m

    Xs = [np.eye(n) for n in d.dims]
    Zs = [np.eye(n) for n in d.dims]
    xl = np.ones(d.nl)
    zl = np.ones(d.nl)
    xf = np.zeros(d.nf)
    y = np.zeros(m)
    tau = 1.0
    kappa = 1.0

    cnorm = 1.0
    status = Status.MAX_ITERATIONS
    it = 0
    best = None
    best_it = 0

    def inner(As, Bs):
        return sum(float(np.sum(a * b)) for a, b in zip(As, Bs))

    for it in range(st.max_iter + 1):
        # residuals of the embedding
        Ax = d.A_op(Xs, xl, xf)
        rp = Ax - d.b * tau
        ATs, ATl, ATf = d.AT_op(y)
        rdS = [S + Z - C * tau for S, Z, C in zip(ATs, Zs, d.C)]
        rdl = ATl + zl - d.cl * tau
        rdf = ATf - d.cf * tau
        cx = d.inner_c(Xs, xl, xf)
        by = float(d.b @ y)
        rg = by - cx - kappa
        mu = (inner(Xs, Zs) + float(xl @ zl) + tau * kappa) / (d.nu + 1)

        # termination tests on the de-homogenised point
        # per-row relative residual: a single large right-hand side must not loosen the others
        pres = np.max(np.abs(rp) / (tau * (1.0 + np.abs(d.b))), initial=0.0)
        dres = max([np.max(np.abs(R), initial=0.0) for R in rdS] + [np.max(np.abs(rdl), initial=0.0),
                                                                    np.max(np.abs(rdf), initial=0.0)]) / tau / cnorm
        pobj, dobj = cx / tau, by / tau
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        if st.verbose:
            log.info("it %3d pres %.2e dres %.2e gap %.2e mu %.2e tau %.2e kappa %.2e", it, pres, dres, gap, mu, tau, kappa)
        if pres <= st.tol_feas and dres <= st.tol_feas and gap <= st.tol_gap:
            status = Status.OPTIMAL
            break
        # weakly feasible SOS programs drive tau to zero; keep the best primal iterate
        score = max(pres, gap)
        if best is None or score < 0.99 * best[0]:
            best = (score, [X.copy() for X in Xs], xl.copy(), xf.copy(), y.copy(), [Z.copy() for Z in Zs], zl.copy(), tau)
            best_it = it
        elif it - best_it >= st.stall_iters:
            break
        # infeasibility certificates
        if by > 0:
            ray = max([np.max(np.abs(S + Z), initial=0.0) for S, Z in zip(ATs, Zs)]
                      + [np.max(np.abs(ATl + zl), initial=0.0), np.max(np.abs(ATf), initial=0.0)]) / by
            if ray <= st.tol_infeas or (tau / kappa < 1e-8 and ray <= 1e3 * st.tol_infeas):
                status = Status.INFEASIBLE
                break
        if cx < 0:
            ray = np.max(np.abs(Ax), initial=0.0) / (-cx)
            if ray <= st.tol_infeas or (tau / kappa < 1e-8 and ray <= 1e3 * st.tol_infeas):
                status = Status.UNBOUNDED
                break
        if it == st.max_iter:
            break

        try:
            scal = [_nt_scaling(X, Z) for X, Z in zip(Xs, Zs)]
        except np.linalg.LinAlgError:
            status = Status.NUMERICAL_ERROR
            break
        Gs = [g for g, _ in scal]
        lams = [l for _, l in scal]
        Ws = [G @ G.T for G in Gs]
        Ginvs = [np.linalg.inv(G) for G in Gs]
        hl = xl / zl
        lam_l = np.sqrt(xl * zl)
        try:
            kkt = _Kkt(d, Ws, hl)
        except (np.linalg.LinAlgError, ValueError):
            status = Status.NUMERICAL_ERROR
            break

        HcS = [W @ C @ W for W, C in zip(Ws, d.C)]
        q1 = d.A_op(HcS, hl * d.cl, np.zeros(d.nf)) + d.b
        AcHc = q1 - d.b
        cHc = inner(d.C, HcS) + float(d.cl @ (hl * d.cl))

        def newton(rpp, rdS_, rdl_, rdf_, rg_, RcS, rcl, rtau, vsol):
            """Solve the embedded Newton system for an arbitrary right-hand side."""
            HrdS = [W @ R @ W for W, R in zip(Ws, rdS_)]
            p1 = rpp + d.A_op([H - Rc for H, Rc in zip(HrdS, RcS)], hl * rdl_ - rcl, np.zeros(d.nf))
            u_y, u_f = kkt.solve(p1, rdf_)
            v_y, v_f = vsol
            cHrd = inner(d.C, HrdS) + float(d.cl @ (hl * rdl_))
            crc = inner(d.C, RcS) + float(d.cl @ rcl)
            denom = float(d.b @ v_y - AcHc @ v_y + cHc - d.cf @ v_f + kappa / tau)
            numer = float(rg_ - d.b @ u_y + AcHc @ u_y - cHrd + crc + d.cf @ u_f + rtau / tau)
            dtau = numer / denom
            dy = u_y + dtau * v_y
            dxf = u_f + dtau * v_f
            ATs_, ATl_, _ = d.AT_op(dy)
            dXs = [W @ (S - C * dtau - R) @ W + Rc for W, S, C, R, Rc in zip(Ws, ATs_, d.C, rdS_, RcS)]
            dxl = hl * (ATl_ - d.cl * dtau - rdl_) + rcl
            dZs = [R - S + C * dtau for R, S, C in zip(rdS_, ATs_, d.C)]
            dzl = rdl_ - ATl_ + d.cl * dtau
            dkappa = (rtau - kappa * dtau) / tau
            return [dXs, dxl, dxf, dy, dZs, dzl, dtau, dkappa]

        def newton_residual(dr, rpp, rdS_, rdl_, rdf_, rg_, RcS, rcl, rtau):
            dXs, dxl, dxf, dy, dZs, dzl, dtau, dkappa = dr
            ATs_, ATl_, ATf_ = d.AT_op(dy)
            e1 = rpp - (d.A_op(dXs, dxl, dxf) - d.b * dtau)
            e2 = [R - (S + dZ - C * dtau) for R, S, dZ, C in zip(rdS_, ATs_, dZs, d.C)]
            e2l = rdl_ - (ATl_ + dzl - d.cl * dtau)
            e2f = rdf_ - (ATf_ - d.cf * dtau)
            e3 = rg_ - (float(d.b @ dy) - d.inner_c(dXs, dxl, dxf) - dkappa)
            e4 = [Rc - (dX + W @ dZ @ W) for Rc, dX, W, dZ in zip(RcS, dXs, Ws, dZs)]
            e4l = rcl - (dxl + hl * dzl)
            e5 = rtau - (kappa * dtau + tau * dkappa)
            return e1, e2, e2l, e2f, e3, e4, e4l, e5

        vsol = kkt.solve(q1, d.cf)

        def direction(frac, RcS, rcl, rtau):
            """Newton direction with iterative refinement on the primal rows."""
            rhs = (-frac * rp, [-frac * R for R in rdS], -frac * rdl, -frac * rdf, -frac * rg, RcS, rcl, rtau)
            dr = newton(*rhs, vsol)
            target = 1e-3 * max(np.max(np.abs(rhs[0]), initial=0.0), 1e-14)
            for _ in range(st.refine_steps):
                res = newton_residual(dr, *rhs)
                corr = newton(*res, vsol)
                for k in (0, 4):
                    dr[k] = [a + b for a, b in zip(dr[k], corr[k])]
                for k in (1, 2, 3, 5, 6, 7):
                    dr[k] = dr[k] + corr[k]
                if st.verbose:
                    log.info("    refine e1 %.2e target %.2e", np.max(np.abs(res[0]), initial=0.0), target)
                if np.max(np.abs(res[0]), initial=0.0) <= target:
                    break
            return tuple(dr)

        def rc_blocks(targets):
            # targets: per block scaled-space right side R (n x n); returns G T G^T
            out = []
            for G, lam, R in zip(Gs, lams, targets):
                T = 2.0 * R / (lam[:, None] + lam[None, :])
                out.append(G @ T @ G.T)
            return out

        def step_length(dXs, dxl, dZs, dzl, dtau, dkappa):
            a = np.inf
            for G, Gi, lam, dX, dZ in zip(Gs, Ginvs, lams, dXs, dZs):
                a = min(a, _max_step_psd(lam, Gi @ dX @ Gi.T), _max_step_psd(lam, G.T @ dZ @ G))
            a = min(a, _max_step_lp(xl, dxl), _max_step_lp(zl, dzl),
                    _max_step_lp(np.array([tau]), np.array([dtau])),
                    _max_step_lp(np.array([kappa]), np.array([dkappa])))
            return a

        try:
            # predictor
            RcS = rc_blocks([-np.diag(lam ** 2) for lam in lams])
            aff = direction(1.0, RcS, -xl, -tau * kappa)
            a_aff = min(1.0, step_length(aff[0], aff[1], aff[4], aff[5], aff[6], aff[7]))
            sigma = (1.0 - a_aff) ** 3
            # corrector
            targets = []
            for G, Gi, lam, dX, dZ in zip(Gs, Ginvs, lams, aff[0], aff[4]):
                dXt = Gi @ dX @ Gi.T
                dZt = G.T @ dZ @ G
                P = dXt @ dZt
                targets.append(sigma * mu * np.eye(lam.size) - np.diag(lam ** 2) - 0.5 * (P + P.T))
            RcS = rc_blocks(targets)
            rl = (sigma * mu - lam_l ** 2 - aff[1] * aff[5])
            rcl = rl / lam_l * np.sqrt(hl)
            rtau = sigma * mu - tau * kappa - aff[6] * aff[7]
            dXs, dxl, dxf, dy, dZs, dzl, dtau, dkappa = direction(1.0 - sigma, RcS, rcl, rtau)
            alpha = min(1.0, st.step_fraction * step_length(dXs, dxl, dZs, dzl, dtau, dkappa))
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            status = Status.NUMERICAL_ERROR
            break
        if not np.isfinite(alpha) or alpha <= 1e-12:
            status = Status.NUMERICAL_ERROR
            break

        Xs = [X + alpha * dX for X, dX in zip(Xs, dXs)]
        Zs = [Z + alpha * dZ for Z, dZ in zip(Zs, dZs)]
        Xs = [0.5 * (X + X.T) for X in Xs]
        Zs = [0.5 * (Z + Z.T) for Z in Zs]
        xl = xl + alpha * dxl
        zl = zl + alpha * dzl
        xf = xf + alpha * dxf
        y = y + alpha * dy
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa
        if not (np.isfinite(tau) and tau > 0 and kappa > 0):
            status = Status.NUMERICAL_ERROR
            break

    if status in (Status.MAX_ITERATIONS, Status.NUMERICAL_ERROR) and best is not None:
        _, Xs, xl, xf, y, Zs, zl, tau = best

    if status in (Status.INFEASIBLE, Status.UNBOUNDED):
        # report the normalised certificate rather than a de-homogenised point
        scale = 1.0
    else:
        scale = 1.0 / tau
    blocks = [X * scale for X in Xs]
    nonneg = xl * scale
    free = xf * scale
    y_out = y * scale * d.row_scale / d.obj_scale
    dual_blocks = [Z * scale / d.obj_scale for Z in Zs]
    dual_nonneg = zl * scale / d.obj_scale
    metrics = residuals(problem, blocks, free, nonneg, y=y_out)
    metrics["tau"] = float(tau)
    metrics["kappa"] = float(kappa)
    if status in (Status.MAX_ITERATIONS, Status.NUMERICAL_ERROR):
        # an honest best iterate may still be a usable feasible point
        loose = max(st.tol_feas, st.tol_feas_loose)
        if (metrics["relative_primal_residual"] <= loose and metrics["min_block_eig"] >= -st.tol_feas
                and metrics["min_nonneg"] >= -st.tol_feas and metrics.get("duality_gap", np.inf) <= loose):
            status = Status.FEASIBLE
    return SdpSolution(status, blocks, free, nonneg, y_out, dual_blocks, dual_nonneg, it, metrics)
