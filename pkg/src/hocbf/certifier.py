"""Verification of given HOCBF chains: does a polynomial controller exist that
keeps every chain's top-level condition, the CLIF bounds and the input set
satisfied on the certified region?"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import sdp
from .poly import AffinePoly, Poly, VarSpace
from .sos import CertificateCheck, Membership, SosProgram, SosSolution
from .system import (Clif, ControlAffineSystem, HocbfCandidate, ModelError, SemialgebraicSet, StateScaling,
                     build_chain, check_relative_degree)

log = logging.getLogger(__name__)

AUDIT_TOL = 1e-6
AUDIT_SAMPLES = 5000
MIN_AUDIT_SAMPLES = 100


class Verdict(str, enum.Enum):
    VERIFIED = "Verified"
    INFEASIBLE = "Infeasible"
    AUDIT_FAILED = "AuditFailed"
    EMPTY_REGION = "EmptyRegion"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class VerificationProblem:
    system: ControlAffineSystem
    X: SemialgebraicSet
    U: SemialgebraicSet
    candidates: List[HocbfCandidate]
    clifs: List[Clif] = field(default_factory=list)
    deg_u: int = 2
    scale: bool = True
    settings: sdp.Settings = field(default_factory=sdp.Settings)
    backend: str = "native"


@dataclass
class AuditStats:
    accepted: int
    drawn: int
    minima: Dict[str, float]

    @property
    def worst(self) -> float:
        return min(self.minima.values(), default=np.inf)


@dataclass
class VerificationReport:
    verdict: Verdict
    rho: Dict[str, float]
    controller: List[Poly]  # original coordinates
    checks: List[CertificateCheck]
    audit: Optional[AuditStats]
    sdp_status: str
    sdp_metrics: Dict[str, float]
    scaling: StateScaling
    memberships: List[Membership] = field(default_factory=list)
    grams: Dict[int, np.ndarray] = field(default_factory=dict)
    message: str = ""

    @property
    def verified(self) -> bool:
        return self.verdict == Verdict.VERIFIED

    @property
    def rho_sum(self) -> float:
        return float(sum(self.rho.values()))


def split_affine_in_inputs(c: Poly) -> tuple:
    """Write c(x, u) = c0(x) + sum_k ck(x) u_k; raise if c is not affine in u."""
    space = c.space
    n, m = space.n, space.m
    c0: Dict[tuple, float] = {}
    ck: List[Dict[tuple, float]] = [dict() for _ in range(m)]
    for e, v in c.terms.items():
        du = sum(e[n:])
        if du == 0:
            c0[e] = v
        elif du == 1:
            k = next(i for i in range(m) if e[n + i])
            base = list(e)
            base[n + k] = 0
            ck[k][tuple(base)] = v
        else:
            raise ModelError("input constraints must be affine in the inputs")
    return Poly(space, c0), [Poly(space, t) for t in ck]


def compose_inputs(c: Poly, u: Sequence) -> AffinePoly:
    """c(x, u(x)) for a constraint affine in u and decision polynomials u_k."""
    c0, cks = split_affine_in_inputs(c)
    out = AffinePoly.lift(c0)
    for ck, uk in zip(cks, u):
        if not ck.is_zero():
            out = out + uk * ck
    return out


@dataclass
class Assembly:
    """Memberships of one verification program in working coordinates."""

    program: SosProgram
    u: List[AffinePoly]
    rho_ids: Dict[str, int]
    hocbf: List[Membership]
    clif: List[Membership]
    inputs: List[Membership]


def add_controller_constraints(prog: SosProgram, sys_w: ControlAffineSystem, U: SemialgebraicSet,
                               clifs_w: Sequence[Clif], gens: Sequence[Poly], deg_u: int, tag: str = ""):
    """Decision controller, CLIF memberships with slack rho_k, input memberships."""
    m = sys_w.m
    u = [prog.new_poly(f"{tag}u{k + 1}", deg_u)[0] for k in range(m)]
    rho_ids: Dict[str, int] = {}
    clif_mems = []
    for cl in clifs_w:
        rid = prog.new_nonneg(f"rho_{cl.name}")
        rho_ids[cl.name] = rid
        lhs = AffinePoly.lift(-sys_w.lie_f(cl.V)) + AffinePoly.variable(prog.space, rid)
        for gk, uk in zip(sys_w.lie_g(cl.V), u):
            if not gk.is_zero():
                lhs = lhs - uk * gk
        clif_mems.append(prog.add_membership(lhs, gens, name=f"{tag}clif[{cl.name}]"))
    in_mems = []
    for q, c in enumerate(U.generators):
        in_mems.append(prog.add_membership(compose_inputs(c, u), gens, name=f"{tag}input[{q}]"))
    return u, rho_ids, clif_mems, in_mems


def box_radius(region: SemialgebraicSet) -> np.ndarray:
    """Per-variable bound max(|lo|, |hi|); unboxed variables get inf, inputs 0."""
    space = region.space
    out = np.full(len(space), np.inf)
    out[space.n:] = 0.0
    for k, vi in enumerate(region.idx):
        out[vi] = max(abs(region.lo[k]), abs(region.hi[k]))
    return out


def absorb_clif_residuals(prog: SosProgram, sol: SosSolution, clif_mems, rho_ids: Dict[str, int],
                          region: SemialgebraicSet):
    """Shift each rho by its certificate's residual bound so the CLIF inequality holds exactly."""
    if not sol.ok:
        return
    radius = box_radius(region)
    for mem, rid in zip(clif_mems, rho_ids.values()):
        prog.absorb_residual(mem, sol, rid, radius)


def hocbf_lhs(chain, u: Sequence[AffinePoly]) -> AffinePoly:
    lhs = AffinePoly.lift(chain.drift_term)
    for gk, uk in zip(chain.input_row, u):
        if not gk.is_zero():
            lhs = lhs + uk * gk
    return lhs


def _validate(problem: VerificationProblem):
    if not problem.candidates:
        raise ModelError("at least one HOCBF candidate is required")
    for cand in problem.candidates:
        ok, _ = check_relative_degree(cand.b, problem.system, cand.r)
        if not ok:
            raise ModelError(f"{cand.name}: relative degree check failed for r = {cand.r}")
        if any(s is None for s in cand.slots):
            raise ModelError(f"{cand.name}: every class-K slot must be known for verification")


def verify(problem: VerificationProblem, seed: int = 0, audit_samples: int = AUDIT_SAMPLES) -> VerificationReport:
    """Joint verification of all candidates with one shared controller."""
    _validate(problem)
    sys = problem.system
    scaling = StateScaling.from_box(sys.space, problem.X) if problem.scale else StateScaling.identity(sys.space)
    sys_w = scaling.system_to_w(sys)
    X_w = scaling.set_to_w(problem.X)
    chains_w = [build_chain(scaling.candidate_to_w(c), sys_w) for c in problem.candidates]
    clifs_w = [scaling.clif_to_w(c) for c in problem.clifs]
    gens = [ch.psis[-1] for ch in chains_w] + list(X_w.generators)

    prog = SosProgram(sys.space)
    u, rho_ids, clif_mems, in_mems = add_controller_constraints(prog, sys_w, problem.U, clifs_w, gens, problem.deg_u)
    hocbf_mems = [prog.add_membership(hocbf_lhs(ch, u), gens, name=f"hocbf[{ch.candidate.name}]")
                  for ch in chains_w]
    prog.set_objective({rid: 1.0 for rid in rho_ids.values()})
    sol = prog.solve(problem.settings, backend=problem.backend)
    absorb_clif_residuals(prog, sol, clif_mems, rho_ids, X_w)
    return finish_report(problem, prog, sol, u, rho_ids, scaling, seed, audit_samples)


def verify_single(problem: VerificationProblem, **kw) -> VerificationReport:
    if len(problem.candidates) != 1:
        raise ModelError("verify_single expects exactly one candidate")
    return verify(problem, **kw)


def verify_multi(problem: VerificationProblem, **kw) -> VerificationReport:
    if len(problem.candidates) < 2:
        log.info("verify_multi called with a single candidate")
    return verify(problem, **kw)


def finish_report(problem: VerificationProblem, prog: SosProgram, sol: SosSolution, u, rho_ids, scaling,
                  seed: int, audit_samples: int) -> VerificationReport:
    metrics = dict(sol.sdp_solution.metrics) if sol.sdp_solution else {}
    base = dict(rho={}, controller=[], checks=[], audit=None, sdp_status=sol.status.value, sdp_metrics=metrics,
                scaling=scaling, memberships=prog.memberships)
    if sol.status == sdp.Status.INFEASIBLE:
        return VerificationReport(Verdict.INFEASIBLE, message="SDP infeasible", **base)
    if not sol.ok:
        return VerificationReport(Verdict.NUMERICAL_FAILURE, message=f"SDP status {sol.status.value}", **base)
    rng = np.random.default_rng(seed)
    box_pts = scaling.points_to_w(rng.uniform(problem.X.lo, problem.X.hi, size=(1000, len(problem.X.idx))))
    box_full = np.zeros((box_pts.shape[0], len(prog.space)))
    box_full[:, problem.X.idx] = box_pts
    checks = prog.check_all(sol, box_full)
    u_x = [scaling.poly_to_x(uk.collapse(sol.values)) for uk in u]
    rho = {name: sol.values[rid] for name, rid in rho_ids.items()}
    audit = sample_audit(problem, u_x, rho, audit_samples, seed)
    base.update(rho=rho, controller=u_x, checks=checks, audit=audit, grams=sol.grams)
    if not all(c.ok() for c in checks):
        bad = next(c for c in checks if not c.ok())
        return VerificationReport(Verdict.NUMERICAL_FAILURE,
                                  message=f"certificate {bad.name} failed validation (residual {bad.residual:.2e}, "
                                          f"min eig {bad.min_eig:.2e})", **base)
    if audit.accepted == 0:
        return VerificationReport(Verdict.EMPTY_REGION, message="no sampled state lies in the certified region; "
                                                                 "the joint safe set appears empty", **base)
    if audit.worst < -AUDIT_TOL:
        return VerificationReport(Verdict.AUDIT_FAILED, message=f"sample audit minimum {audit.worst:.3e}", **base)
    msg = "" if audit.accepted >= MIN_AUDIT_SAMPLES else f"only {audit.accepted} audit samples accepted"
    return VerificationReport(Verdict.VERIFIED, message=msg, **base)


def sample_audit(problem: VerificationProblem, u_x: Sequence[Poly], rho: Dict[str, float],
                 count: int = AUDIT_SAMPLES, seed: int = 0) -> AuditStats:
    """Evaluate every certified inequality at u*(x) on samples of the certified region."""
    sys = problem.system
    chains = [build_chain(c, sys) for c in problem.candidates]
    region = problem.X.with_generators([ch.psis[-1] for ch in chains])
    rng = np.random.default_rng(seed)
    max_draws = 200 * count
    pts = region.sample(count, rng, max_draws=max_draws)
    drawn = max_draws if len(pts) < count else None
    minima: Dict[str, float] = {}
    if len(pts) == 0:
        return AuditStats(0, max_draws, minima)
    full = np.zeros((len(pts), len(sys.space)))
    full[:, region.idx] = pts
    uvals = np.array([uk.eval_many(full) for uk in u_x]).T  # N x m
    for ch in chains:
        val = ch.drift_term.eval_many(full)
        for k, gk in enumerate(ch.input_row):
            val = val + gk.eval_many(full) * uvals[:, k]
        minima[f"hocbf[{ch.candidate.name}]"] = float(val.min())
    for cl in problem.clifs:
        val = sys.lie_f(cl.V).eval_many(full)
        for k, gk in enumerate(sys.lie_g(cl.V)):
            val = val + gk.eval_many(full) * uvals[:, k]
        minima[f"clif[{cl.name}]"] = float((rho[cl.name] - val).min())
    ufull = full.copy()
    ufull[:, sys.n:] = uvals
    for q, c in enumerate(problem.U.generators):
        minima[f"input[{q}]"] = float(c.eval_many(ufull).min())
    return AuditStats(len(pts), drawn or -1, minima)
