"""Quadratic-module membership constraints compiled to a standard-form SDP.

A membership ``lhs in Q(g_1..g_k)`` asks for SOS multipliers with

    lhs = s_0 + s_1 g_1 + ... + s_k g_k

identically. Each multiplier is a Gram form z^T Q z over a monomial basis, so
matching coefficients gives linear equalities in the Gram entries and in the
scalar decision variables appearing affinely in ``lhs``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from . import sdp
from .poly import AffinePoly, Monomial, Poly, VarSpace, grlex_key, monomial_basis

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-6
MIN_EIG_TOL = -1e-7
BACKOFF = (4.0, 16.0, 64.0)
BACKOFF_ABS = 1e-2
PROJECTION_SHIFTS = (None, 1e-2, 1e-4, 1e-6, 1e-8)


class SosError(ValueError):
    pass


def even_ceil(d: int) -> int:
    return d + (d % 2)


@dataclass
class SosMultiplier:
    name: str
    basis: List[Monomial]
    block: int
    generator: Poly

    @property
    def degree(self) -> int:
        return 2 * max((sum(e) for e in self.basis), default=0)

    def poly(self, Q: np.ndarray, space: VarSpace) -> Poly:
        """The polynomial z^T Q z."""
        terms: Dict[Tuple[int, ...], float] = {}
        N = len(self.basis)
        for a in range(N):
            for b in range(a, N):
                q = Q[a, b] if a == b else 2.0 * Q[a, b]
                if q == 0.0:
                    continue
                e = tuple(x + y for x, y in zip(self.basis[a], self.basis[b]))
                terms[e] = terms.get(e, 0.0) + q
        return Poly(space, terms, tol=0.0)


@dataclass
class Membership:
    name: str
    lhs: AffinePoly
    generators: List[Poly]
    multipliers: List[SosMultiplier]  # s_0 first
    rows: Dict[Tuple[int, ...], int] = field(default_factory=dict)  # monomial -> global row
    row_scale: Dict[Tuple[int, ...], float] = field(default_factory=dict)


@dataclass
class CompiledSdp:
    problem: sdp.SdpProblem
    var_index: Dict[int, Tuple[str, int]]  # decision id -> ("free"|"nonneg", column)
    blocks: Dict[int, SosMultiplier]


@dataclass
class CertificateCheck:
    name: str
    residual: float
    min_eig: float
    audit_min: Optional[float] = None
    audit_count: int = 0

    def ok(self, tol: float = RESIDUAL_TOL, eig_tol: float = MIN_EIG_TOL, audit_tol: float = 1e-6) -> bool:
        good = self.residual <= tol and self.min_eig >= eig_tol
        if self.audit_min is not None:
            good = good and self.audit_min >= -audit_tol
        return bool(good)


@dataclass
class SosSolution:
    status: sdp.Status
    values: Dict[int, float]
    grams: Dict[int, np.ndarray]  # block id -> Gram
    sdp_solution: Optional[sdp.SdpSolution]
    objective: float

    @property
    def ok(self) -> bool:
        return self.status in (sdp.Status.OPTIMAL, sdp.Status.FEASIBLE)


class SosProgram:
    """Builder for a set of quadratic-module memberships sharing decision variables."""

    def __init__(self, space: VarSpace):
        self.space = space
        self.kinds: List[str] = []
        self.names: List[str] = []
        self.memberships: List[Membership] = []
        self.multipliers: List[SosMultiplier] = []
        self.linear: List[Tuple[Dict[int, float], float]] = []
        self.objective: Dict[int, float] = {}
        self._compiled: Optional[CompiledSdp] = None

    # -- decision variables ------------------------------------------------

    def _new_var(self, kind: str, name: str) -> int:
        self.kinds.append(kind)
        self.names.append(name)
        self._compiled = None
        return len(self.kinds) - 1

    def new_free(self, name: str = "") -> int:
        return self._new_var("free", name or f"v{len(self.kinds)}")

    def new_nonneg(self, name: str = "") -> int:
        return self._new_var("nonneg", name or f"v{len(self.kinds)}")

    def new_poly(self, name: str, degree: int, variables: Optional[Sequence] = None) -> Tuple[AffinePoly, List[int], List[Monomial]]:
        """Polynomial with free coefficients over the monomials of degree <= ``degree``."""
        basis = monomial_basis(self.space, variables, degree)
        ids = [self.new_free(f"{name}[{k}]") for k in range(len(basis))]
        parts = {i: self.space.monomial(e) for i, e in zip(ids, basis)}
        return AffinePoly(self.space, None, parts), ids, basis

    def new_sos(self, variables: Sequence, degree: int, name: str = "", generator: Optional[Poly] = None) -> SosMultiplier:
        if degree < 0 or degree % 2:
            raise SosError(f"SOS multiplier degree must be even and >= 0, got {degree}")
        basis = monomial_basis(self.space, variables, degree // 2)
        mult = SosMultiplier(name or f"s{len(self.multipliers)}", basis, len(self.multipliers),
                             generator if generator is not None else self.space.const(1.0))
        self.multipliers.append(mult)
        self._compiled = None
        return mult

    # -- constraints -------------------------------------------------------

    def add_membership(self, lhs: Union[AffinePoly, Poly], generators: Sequence[Poly] = (),
                       degrees: Optional[Sequence[int]] = None, name: str = "") -> Membership:
        """Require lhs = s_0 + sum_i s_i g_i. ``degrees`` lists deg s_0, deg s_1, ..."""
        if isinstance(lhs, Poly):
            lhs = AffinePoly.lift(lhs)
        gens = list(generators)
        for g in gens:
            if g.space != self.space:
                raise SosError("generator uses a different variable space")
        n = self.space.n
        used = set()
        for p in [lhs.const] + list(lhs.parts.values()) + gens:
            used.update(p.uses())
        if any(i >= n for i in used):
            raise SosError("memberships may only involve state variables; compose inputs first")
        variables = sorted(used)
        d = lhs.degree
        if degrees is None:
            degrees = [even_ceil(d)] + [max(0, even_ceil(d - g.degree)) for g in gens]
        if len(degrees) != len(gens) + 1:
            raise SosError("need one multiplier degree per generator plus s_0")
        label = name or f"m{len(self.memberships)}"
        mults = [self.new_sos(variables, degrees[0], f"{label}.s0")]
        for k, (g, dg) in enumerate(zip(gens, degrees[1:]), start=1):
            mults.append(self.new_sos(variables, dg, f"{label}.s{k}", generator=g))
        mem = Membership(label, lhs, gens, mults)
        produced = set()
        for mu in mults:
            prods = {tuple(a + b for a, b in zip(mu.basis[i], mu.basis[j]))
                     for i in range(len(mu.basis)) for j in range(i, len(mu.basis))}
            for e in prods:
                for eg in mu.generator.terms:
                    produced.add(tuple(a + b for a, b in zip(e, eg)))
        missing = [e for e in lhs.monomials() if e not in produced]
        if missing:
            raise SosError(f"{label}: degree shortfall, lhs monomial {missing[0]} cannot be produced")
        self.memberships.append(mem)
        self._compiled = None
        return mem

    def add_vector_membership(self, lhs: Sequence[Union[AffinePoly, Poly]], generators: Sequence[Poly] = (),
                              degrees=None, name: str = "") -> List[Membership]:
        label = name or f"m{len(self.memberships)}"
        return [self.add_membership(p, generators, degrees, f"{label}[{k}]") for k, p in enumerate(lhs)]

    def add_linear(self, coeffs: Mapping[int, float], rhs: float, sense: str = "=="):
        """Scalar constraint sum coeffs[k] v_k (==, <=, >=) rhs."""
        coeffs = dict(coeffs)
        if sense == "<=":
            coeffs[self.new_nonneg("slack")] = 1.0
        elif sense == ">=":
            coeffs[self.new_nonneg("slack")] = -1.0
        elif sense != "==":
            raise SosError(f"unknown sense {sense!r}")
        self.linear.append((coeffs, float(rhs)))
        self._compiled = None

    def set_objective(self, coeffs: Mapping[int, float]):
        self.objective = {int(k): float(v) for k, v in coeffs.items()}
        self._compiled = None

    # -- compilation -------------------------------------------------------

    def compile(self) -> CompiledSdp:
        if not self.memberships and not self.linear:
            raise SosError("empty problem")
        var_index: Dict[int, Tuple[str, int]] = {}
        nf = nn = 0
        for k, kind in enumerate(self.kinds):
            if kind == "free":
                var_index[k] = ("free", nf)
                nf += 1
            else:
                var_index[k] = ("nonneg", nn)
                nn += 1
        b: List[float] = []
        blk_rows: List[List[np.ndarray]] = [[] for _ in self.multipliers]
        blk_i: List[List[np.ndarray]] = [[] for _ in self.multipliers]
        blk_j: List[List[np.ndarray]] = [[] for _ in self.multipliers]
        blk_v: List[List[np.ndarray]] = [[] for _ in self.multipliers]
        sc_rows: List[int] = []
        sc_cols: List[Tuple[str, int]] = []
        sc_vals: List[float] = []

        for mem in self.memberships:
            rowmap: Dict[Tuple[int, ...], int] = {}
            local: List[Tuple[int, List]] = []  # per multiplier: list of (mono, i, j, v)
            entries = []
            for mu in mem.multipliers:
                N = len(mu.basis)
                iu, ju = np.triu_indices(N)
                basis = np.array(mu.basis, dtype=np.int64).reshape(N, -1)
                sums = basis[iu] + basis[ju]
                mult = np.where(iu == ju, 1.0, 2.0)
                for eg, cg in mu.generator.terms.items():
                    monos = sums + np.asarray(eg, dtype=np.int64)
                    entries.append((mu.block, monos, iu, ju, cg * mult))
            # assign rows in graded order for determinism
            all_monos = set(mem.lhs.monomials())
            for _, monos, _, _, _ in entries:
                all_monos.update(map(tuple, monos.tolist()))
            for e in sorted(all_monos, key=grlex_key):
                rowmap[e] = len(b)
                b.append(mem.lhs.const.coeff(e))
            for blk, monos, iu, ju, vals in entries:
                rows = np.fromiter((rowmap[tuple(e)] for e in monos.tolist()), dtype=np.int64, count=len(monos))
                blk_rows[blk].append(rows)
                blk_i[blk].append(iu)
                blk_j[blk].append(ju)
                blk_v[blk].append(vals)
            for vid, part in mem.lhs.parts.items():
                for e, c in part.terms.items():
                    sc_rows.append(rowmap[e])
                    sc_cols.append(var_index[vid])
                    sc_vals.append(-c)
            mem.rows = rowmap

        for coeffs, rhs in self.linear:
            r = len(b)
            b.append(rhs)
            for vid, c in coeffs.items():
                sc_rows.append(r)
                sc_cols.append(var_index[vid])
                sc_vals.append(c)

        m = len(b)
        b_arr = np.array(b, dtype=float)
        block_entries = []
        for k in range(len(self.multipliers)):
            if blk_rows[k]:
                block_entries.append((np.concatenate(blk_rows[k]), np.concatenate(blk_i[k]),
                                      np.concatenate(blk_j[k]), np.concatenate(blk_v[k])))
            else:
                z = np.zeros(0, dtype=np.int64)
                block_entries.append((z, z, z, np.zeros(0)))
        fr = [(r, c[1], v) for r, c, v in zip(sc_rows, sc_cols, sc_vals) if c[0] == "free"]
        nr = [(r, c[1], v) for r, c, v in zip(sc_rows, sc_cols, sc_vals) if c[0] == "nonneg"]

        def csr(trip, ncol):
            if not trip:
                return sp.csr_matrix((m, ncol))
            a = np.array(trip, dtype=float)
            return sp.csr_matrix((a[:, 2], (a[:, 0].astype(int), a[:, 1].astype(int))), shape=(m, ncol))

        A_free, A_nonneg = csr(fr, nf), csr(nr, nn)
        # merge duplicate (row, i, j) entries
        merged = []
        for (r, i, j, v), mu in zip(block_entries, self.multipliers):
            if r.size:
                N = len(mu.basis)
                key = (r * N + i) * N + j
                uniq, inv = np.unique(key, return_inverse=True)
                vals = np.zeros(uniq.size)
                np.add.at(vals, inv, v)
                rr = uniq // (N * N)
                ii = (uniq // N) % N
                jj = uniq % N
                nz = vals != 0
                merged.append((rr[nz], ii[nz], jj[nz], vals[nz]))
            else:
                merged.append((r, i, j, v))
        c_free = np.zeros(nf)
        c_nonneg = np.zeros(nn)
        for vid, c in self.objective.items():
            kind, col = var_index[vid]
            (c_free if kind == "free" else c_nonneg)[col] += c

        # drop rows that reference no variable but demand 0 = 0
        problem = sdp.SdpProblem.__new__(sdp.SdpProblem)
        problem.block_dims = [len(mu.basis) for mu in self.multipliers]
        problem.n_free, problem.n_nonneg = nf, nn
        problem.b = b_arr
        problem.block_entries = merged
        problem.A_free, problem.A_nonneg = A_free, A_nonneg
        problem.c_blocks = [(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0)) for _ in self.multipliers]
        problem.c_free, problem.c_nonneg = c_free, c_nonneg
        norms = sdp.row_norms(problem)
        empty = norms == 0
        if np.any(empty & (b_arr != 0)):
            raise SosError("a coefficient row has a nonzero constant but no variables")
        keep = ~empty
        problem = _select_rows(problem, keep)
        # row normalisation by the max-abs coefficient, the constant term included
        norms = np.maximum(norms[keep], np.abs(b_arr[keep]))
        scale = 1.0 / norms
        problem = _scale_rows(problem, scale)
        new_index = np.cumsum(keep) - 1
        for mem in self.memberships:
            mem.rows = {e: int(new_index[r]) for e, r in mem.rows.items() if keep[r]}
            mem.row_scale = {e: float(norms[r]) for e, r in mem.rows.items()}
        problem.validate()
        self._compiled = CompiledSdp(problem, var_index, {mu.block: mu for mu in self.multipliers})
        return self._compiled

    def solve(self, settings: Optional[sdp.Settings] = None, backend: str = "native",
              backoff: Sequence[float] = BACKOFF) -> SosSolution:
        """Solve; if the optimum gives no valid certificate, back off from it.

        SOS programs can be weakly infeasible near their optimum: approximate
        solutions exist for every tolerance but no exact certificate does, and the
        solver stalls on a face of the PSD cone. The backoff keeps the objective
        as a constraint ``obj <= obj* + rel*|obj*| + BACKOFF_ABS`` for growing
        ``rel`` and re-solves for a feasible point, keeping the first that
        validates. The constraint stays in the program so later checks see the
        program that was actually solved.
        """
        sol = self._solve_once(settings, backend)
        if (not backoff or not self.objective or self._valid(sol)
                or sol.status in (sdp.Status.INFEASIBLE, sdp.Status.UNBOUNDED)):
            return sol
        target = sol.objective
        if not np.isfinite(target):
            return sol
        objective = dict(self.objective)
        n_linear, n_vars = len(self.linear), len(self.kinds)
        for rel in backoff:
            bound = target + rel * abs(target) + BACKOFF_ABS
            self.add_linear(objective, bound, "<=")
            self.set_objective({})
            out = self._solve_once(settings, backend)
            self.set_objective(objective)
            log.info("backoff to %.6g: status %s", bound, out.status.value)
            if self._valid(out):
                out.objective = float(sum(c * out.values[k] for k, c in objective.items()))
                return out
            # drop the failed bound and its slack before trying a looser one
            del self.linear[n_linear:]
            del self.kinds[n_vars:], self.names[n_vars:]
            self._compiled = None
        self.compile()
        return sol

    def _valid(self, sol: SosSolution) -> bool:
        return sol.ok and all(c.ok() for c in self.check_all(sol))

    def _solve_once(self, settings: Optional[sdp.Settings] = None, backend: str = "native") -> SosSolution:
        comp = self._compiled or self.compile()
        problem = comp.problem
        if backend == "native":
            sol = sdp.solve(problem, settings)
        elif backend == "cvxpy":
            from .sdp_cvxpy import solve_cvxpy
            sol = solve_cvxpy(problem, settings)
        else:
            raise SosError(f"unknown backend {backend!r}")
        values = {}
        for vid, (kind, col) in comp.var_index.items():
            values[vid] = float(sol.free[col] if kind == "free" else sol.nonneg[col])
        grams = {k: 0.5 * (X + X.T) for k, X in enumerate(sol.blocks)}
        out = SosSolution(sol.status, values, grams, sol, sol.metrics.get("primal_objective", float("nan")))
        if _usable(sol):
            self._repair(out)
            if not out.ok and all(c.ok() for c in self.check_all(out)):
                # the stalled iterate became a valid certificate after projection
                out.status = sdp.Status.FEASIBLE
        return out

    def _repair(self, sol: SosSolution):
        """Project each failing membership, keeping the first variant that validates."""
        for mem in self.memberships:
            if self.check(mem, sol).ok():
                continue
            saved = {mu.block: sol.grams[mu.block].copy() for mu in mem.multipliers}
            for shift in PROJECTION_SHIFTS:
                self.project(sol, shift, only={mem.name})
                if self.check(mem, sol).ok():
                    break
                sol.grams.update({k: v.copy() for k, v in saved.items()})

    def project(self, sol: SosSolution, shift: Optional[float] = None, only=None) -> float:
        """Make membership identities exact by a least-norm Gram correction.

        With ``shift`` set, each Gram Q = V diag(w) V^T is corrected as L dY L^T with
        L = V diag(sqrt(w + shift)): directions where Q is large absorb most of the
        correction and the near-null space of Q is barely touched. ``shift=None``
        is the plain Frobenius projection. Scalar decisions stay fixed, which
        decouples the memberships. Returns the largest spectral norm of any dY.
        """
        comp = self._compiled or self.compile()
        pr = comp.problem
        blocks = [sol.grams[k] for k in range(len(pr.block_dims))]
        free = np.zeros(pr.n_free)
        nonneg = np.zeros(pr.n_nonneg)
        for vid, (kind, col) in comp.var_index.items():
            (free if kind == "free" else nonneg)[col] = sol.values[vid]
        resid = pr.b - sdp.apply_A(pr, blocks, free, nonneg)
        largest = 0.0
        for mem in self.memberships:
            if only is not None and mem.name not in only:
                continue
            rows = np.array(sorted(mem.rows.values()), dtype=np.int64)
            if not rows.size or not np.any(resid[rows]):
                continue
            local = np.full(pr.n_rows, -1, dtype=np.int64)
            local[rows] = np.arange(rows.size)
            parts, factors = [], []
            for mu in mem.multipliers:
                r, i, j, v = pr.block_entries[mu.block]
                N = pr.block_dims[mu.block]
                mask = local[r] >= 0
                Ar = np.zeros((rows.size, N, N))
                np.add.at(Ar, (local[r[mask]], i[mask], j[mask]), 0.5 * v[mask])
                Ar = Ar + Ar.transpose(0, 2, 1)
                if shift is None:
                    L = np.eye(N)
                else:
                    w, V = np.linalg.eigh(sol.grams[mu.block])
                    L = V * np.sqrt(np.clip(w, 0.0, None) + shift)
                parts.append((L.T @ Ar @ L).reshape(rows.size, N * N))
                factors.append((mu.block, L, N))
            A = np.hstack(parts)
            dy = np.linalg.lstsq(A, resid[rows], rcond=None)[0]
            off = 0
            for blk, L, N in factors:
                dY = dy[off:off + N * N].reshape(N, N)
                dY = 0.5 * (dY + dY.T)
                off += N * N
                sol.grams[blk] = sol.grams[blk] + L @ dY @ L.T
                if N:
                    largest = max(largest, float(np.linalg.norm(dY, 2)))
        return largest

    # -- extraction and checks ---------------------------------------------

    def value(self, expr: Union[AffinePoly, Poly], sol: SosSolution) -> Poly:
        if isinstance(expr, Poly):
            return expr
        return expr.collapse(sol.values)

    def multiplier_polys(self, mem: Membership, sol: SosSolution) -> List[Poly]:
        return [mu.poly(sol.grams[mu.block], self.space) for mu in mem.multipliers]

    def check(self, mem: Membership, sol: SosSolution, audit_points: Optional[np.ndarray] = None) -> CertificateCheck:
        return validate_certificate(mem, mem.lhs.collapse(sol.values),
                                    [sol.grams[mu.block] for mu in mem.multipliers], audit_points)

    def check_all(self, sol: SosSolution, audit_points: Optional[np.ndarray] = None) -> List[CertificateCheck]:
        return [self.check(mem, sol, audit_points) for mem in self.memberships]

    def residual_poly(self, mem: Membership, sol: SosSolution) -> Poly:
        resid = mem.lhs.collapse(sol.values)
        for mu in mem.multipliers:
            resid = resid - mu.poly(sol.grams[mu.block], self.space) * mu.generator
        return resid

    def absorb_residual(self, mem: Membership, sol: SosSolution, var_id: int, radius: Sequence[float]) -> float:
        """Raise a scalar that enters ``mem.lhs`` with coefficient +1 by a bound on the
        identity residual over the box |z_i| <= radius_i, and add the same amount to
        the constant entry of s_0. The certificate then holds exactly on that box.
        """
        shape = mem.lhs.parts.get(var_id)
        one = self.space.const(1.0)
        if shape is None or not shape.allclose(one):
            raise SosError("absorb_residual needs a variable entering the lhs as a plain constant")
        s0 = mem.multipliers[0]
        if s0.generator != one or any(s0.basis[0]):
            raise SosError("s_0 must have the constant monomial first")
        delta = box_bound(self.residual_poly(mem, sol), radius)
        if not np.isfinite(delta):
            log.warning("%s: residual cannot be bounded without a box on every variable", mem.name)
            return 0.0
        if delta > 0:
            sol.values[var_id] += delta
            sol.grams[s0.block][0, 0] += delta
        return delta


def _usable(sol: sdp.SdpSolution, tol: float = 1e-4) -> bool:
    """Near-feasible enough that a Gram projection is worth attempting."""
    if sol.status in (sdp.Status.OPTIMAL, sdp.Status.FEASIBLE):
        return True
    if sol.status in (sdp.Status.INFEASIBLE, sdp.Status.UNBOUNDED):
        return False
    m = sol.metrics
    return m.get("relative_primal_residual", np.inf) <= tol and m.get("duality_gap", np.inf) <= tol


def box_bound(p: Poly, radius: Sequence[float]) -> float:
    """Upper bound on |p(z)| over the box |z_i| <= radius_i."""
    r = np.asarray(radius, dtype=float)
    total = 0.0
    for e, c in p.terms.items():
        total += abs(c) * float(np.prod(r ** np.asarray(e, dtype=float)))
    return total


def validate_certificate(mem: Membership, lhs: Poly, grams: Sequence[np.ndarray],
                         audit_points: Optional[np.ndarray] = None) -> CertificateCheck:
    """Recompute lhs - s_0 - sum s_i g_i from Gram matrices; never raises."""
    space = lhs.space
    resid = lhs
    min_eig = np.inf
    for mu, Q in zip(mem.multipliers, grams):
        Q = np.asarray(Q, dtype=float)
        if Q.size:
            min_eig = min(min_eig, float(np.linalg.eigvalsh(0.5 * (Q + Q.T))[0]))
        resid = resid - mu.poly(Q, space) * mu.generator
    worst = 0.0
    for e, c in resid.terms.items():
        scale = mem.row_scale.get(e)
        if scale is None:
            scale = max(1.0, abs(c))
        worst = max(worst, abs(c) / scale)
    report = CertificateCheck(mem.name, worst, float(min_eig if np.isfinite(min_eig) else 0.0))
    if audit_points is not None and len(audit_points):
        pts = np.atleast_2d(audit_points)
        ok = np.ones(pts.shape[0], dtype=bool)
        for g in mem.generators:
            ok &= g.eval_many(pts) >= 0
        report.audit_count = int(ok.sum())
        if ok.any():
            report.audit_min = float(np.min(lhs.eval_many(pts[ok])))
    return report


def _select_rows(problem: sdp.SdpProblem, keep: np.ndarray) -> sdp.SdpProblem:
    if keep.all():
        return problem
    new_index = np.cumsum(keep) - 1
    entries = []
    for r, i, j, v in problem.block_entries:
        mask = keep[r]
        entries.append((new_index[r[mask]], i[mask], j[mask], v[mask]))
    out = sdp.SdpProblem.__new__(sdp.SdpProblem)
    out.__dict__.update(problem.__dict__)
    out.b = problem.b[keep]
    out.block_entries = entries
    out.A_free = problem.A_free[keep]
    out.A_nonneg = problem.A_nonneg[keep]
    return out


def _scale_rows(problem: sdp.SdpProblem, scale: np.ndarray) -> sdp.SdpProblem:
    out = sdp.SdpProblem.__new__(sdp.SdpProblem)
    out.__dict__.update(problem.__dict__)
    out.b = problem.b * scale
    out.block_entries = [(r, i, j, v * scale[r]) for r, i, j, v in problem.block_entries]
    D = sp.diags(scale)
    out.A_free = (D @ problem.A_free).tocsr()
    out.A_nonneg = (D @ problem.A_nonneg).tocsr()
    return out
