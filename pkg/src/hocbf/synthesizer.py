"""Synthesis of class-K functions for HOCBF candidates.

Stage (a) finds, for every level below the top, a template beta with
psi_dd >= beta'(psi) on the companion set. Its square-root bound gives the
runtime class-K function a*sqrt(z) and a linear under-approximation eta*z that
keeps the symbolic chain polynomial. Stage (b) then finds the top-level
template alpha_r together with a polynomial controller and CLIF slacks.

Several candidates are processed in the user's order; each one is certified on
the set cut out by the chains already synthesized.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import sdp
from .certifier import (Verdict, VerificationProblem, VerificationReport, absorb_clif_residuals,
                        add_controller_constraints, compose_inputs, verify)
from .poly import AffinePoly, Poly
from .sos import CertificateCheck, SosProgram, SosSolution
from .system import (ClassKSlot, ClassKTemplate, Clif, ControlAffineSystem, HocbfCandidate, ModelError,
                     SemialgebraicSet, SqrtClassK, StateScaling, build_chain, check_relative_degree,
                     eta_under_approx, sqrt_from_beta, zeta_bar)

log = logging.getLogger(__name__)

MIN_COEFF = 1e-9


class SynthesisError(RuntimeError):
    pass


@dataclass
class SynthesisOptions:
    deg_u: int = 2
    stage_a_input: str = "decision"  # "decision" or "drift"
    coeff_cap: float = 1e3
    clif_weights: Dict[str, float] = field(default_factory=dict)
    runtime_mode: str = "sqrt"
    eta_sqrt2: bool = False
    scale: bool = True
    gate: str = "joint"  # "joint": one verify_multi at the end; "each": verify 1..j after every candidate; "none"
    audit_samples: int = 5000
    seed: int = 0
    settings: sdp.Settings = field(default_factory=sdp.Settings)

    def __post_init__(self):
        if self.stage_a_input not in ("decision", "drift"):
            raise ModelError(f"unknown stage-a input mode {self.stage_a_input!r}")
        if self.runtime_mode not in ("sqrt", "poly"):
            raise ModelError(f"unknown runtime mode {self.runtime_mode!r}")
        if isinstance(self.gate, bool):
            self.gate = "joint" if self.gate else "none"
        if self.gate not in ("joint", "each", "none"):
            raise ModelError(f"unknown gate mode {self.gate!r}")
        if self.deg_u < 0 or self.coeff_cap <= 0:
            raise ModelError("invalid synthesis options")


@dataclass
class StageResult:
    """Outcome of one synthesis SDP."""

    candidate: str
    stage: str  # "a" or "b"
    level: int  # i for stage a, r for stage b
    status: str
    coefficients: List[float]
    generators: List[str]
    checks: List[CertificateCheck]
    program: SosProgram
    solution: SosSolution
    scaling: StateScaling
    seconds: float
    controller: List[Poly] = field(default_factory=list)
    rho: Dict[str, float] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.solution.ok

    @property
    def certified(self) -> bool:
        return self.feasible and all(c.ok() for c in self.checks)

    @property
    def max_residual(self) -> float:
        return max((c.residual for c in self.checks), default=0.0)

    @property
    def min_eig(self) -> float:
        return min((c.min_eig for c in self.checks), default=0.0)


@dataclass
class SynthesizedChain:
    candidate: HocbfCandidate  # every slot filled
    betas: List[ClassKTemplate]
    zeta_bars: List[float]
    sqrt_forms: List[Optional[SqrtClassK]]
    etas: List[float]
    alpha_r: ClassKTemplate
    controller: List[Poly]
    rho: Dict[str, float]
    stages: List[StageResult]
    gate: Optional[VerificationReport] = None


@dataclass
class MultiSynthesisResult:
    chains: List[SynthesizedChain]
    generator_sets: List[Dict[str, List[str]]]
    joint: Optional[VerificationReport]
    failure: Optional[str] = None
    failed_candidate: Optional[str] = None
    failed_stage: Optional[str] = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.failure is None and self.joint is not None and self.joint.verified

    @property
    def stages(self) -> List[StageResult]:
        return [s for ch in self.chains for s in ch.stages]

    @property
    def sdp_count(self) -> int:
        return len(self.stages)

    def class_k_count(self) -> int:
        return sum(ch.candidate.r for ch in self.chains)


# -- helpers ----------------------------------------------------------------------


class _Frame:
    """Working-coordinate copies of the problem data."""

    def __init__(self, system: ControlAffineSystem, X: SemialgebraicSet, scale: bool):
        self.system = system
        self.X = X
        self.scaling = StateScaling.from_box(system.space, X) if scale else StateScaling.identity(system.space)
        self.sys_w = self.scaling.system_to_w(system)
        self.X_w = self.scaling.set_to_w(X)

    def chain_w(self, cand: HocbfCandidate, depth: Optional[int] = None):
        return build_chain(self.scaling.candidate_to_w(cand), self.sys_w, depth)


def _context(frame: _Frame, done: Sequence[HocbfCandidate], level: int):
    """Deepest available psi^k_{min(level, r_k - 1)} of finished candidates, in working coordinates."""
    out = []
    for cand in done:
        k = min(level, cand.r - 1)
        out.append((f"psi{k}[{cand.name}]", frame.chain_w(cand, depth=k + 1).psis[k]))
    return out


def _cap(prog: SosProgram, ids: Sequence[int], cap: float):
    for vid in ids:
        prog.add_linear({vid: 1.0}, cap, "<=")


def _template_vars(prog: SosProgram, n_terms: int, tag: str) -> List[int]:
    return [prog.new_nonneg(f"{tag}[{k + 1}]") for k in range(n_terms)]


def _finish_stage(cand, stage, level, prog, sol, frame, coeff_ids, gen_names, t0, audit=True) -> StageResult:
    checks: List[CertificateCheck] = []
    coeffs: List[float] = []
    if sol.ok:
        rng = np.random.default_rng(0)
        pts = frame.X_w.sample(1000, rng) if audit else np.zeros((0, len(frame.X.idx)))
        full = np.zeros((len(pts), len(prog.space)))
        full[:, frame.X_w.idx] = pts
        checks = prog.check_all(sol, full)
        coeffs = [max(0.0, sol.values[v]) for v in coeff_ids]
    return StageResult(cand.name, stage, level, sol.status.value, coeffs, gen_names, checks, prog, sol,
                       frame.scaling, time.perf_counter() - t0)


def _stage_error(res: StageResult) -> Optional[str]:
    where = f"{res.candidate}: stage ({res.stage}) level {res.level}"
    if not res.feasible:
        return f"{where} SDP {res.status}"
    if not res.certified:
        bad = next(c for c in res.checks if not c.ok())
        return f"{where} certificate {bad.name} invalid (residual {bad.residual:.2e}, min eig {bad.min_eig:.2e})"
    if max(res.coefficients, default=0.0) < MIN_COEFF:
        return (f"{where} only the zero template is feasible (largest coefficient "
                f"{max(res.coefficients, default=0.0):.2e}); the result is not a class-K function")
    return None


# -- stages -----------------------------------------------------------------------


def synth_stage_a(candidate: HocbfCandidate, i: int, system: ControlAffineSystem, X: SemialgebraicSet,
                  U: SemialgebraicSet, context: Sequence[HocbfCandidate] = (),
                  options: Optional[SynthesisOptions] = None) -> StageResult:
    """Find beta_{i-1} with psi_dd_{i-2} - beta'_{i-1}(psi_{i-2}) in the quadratic module.

    Slots 1..i-2 of ``candidate`` must already hold their polynomial forms.
    """
    opt = options or SynthesisOptions()
    if not 2 <= i <= candidate.r:
        raise ModelError(f"stage (a) level must lie in 2..r, got {i}")
    t0 = time.perf_counter()
    frame = _Frame(system, X, opt.scale)
    sys_w = frame.sys_w
    chain = frame.chain_w(candidate, depth=i - 1)
    psi = chain.psis[-1]
    lf = chain.lf_last
    prog = SosProgram(system.space)
    lhs = AffinePoly.lift(sys_w.lie_f(lf))
    input_row = sys_w.lie_g(lf)
    ctx = _context(frame, context, i - 2)
    gens = [g for _, g in ctx] + [psi] + list(frame.X_w.generators)
    gen_names = [n for n, _ in ctx] + [f"psi{i - 2}[{candidate.name}]"] + [f"h{k + 1}" for k in range(len(X.generators))]
    if any(not q.is_zero() for q in input_row) and opt.stage_a_input == "decision":
        ua = [prog.new_poly(f"ua{k + 1}", opt.deg_u)[0] for k in range(sys_w.m)]
        for q, uk in zip(input_row, ua):
            if not q.is_zero():
                lhs = lhs + uk * q
        for k, c in enumerate(U.generators):
            prog.add_membership(compose_inputs(c, ua), gens, name=f"input[{k}]")
    n_terms = int(round(2 * candidate.half_degrees[i - 2]))
    ids = _template_vars(prog, n_terms, "b")
    for k, vid in enumerate(ids):
        # beta'(z) = sum_k b_k z^(k-1)
        lhs = lhs - AffinePoly.variable(prog.space, vid, psi ** k)
    prog.add_membership(lhs, gens, name=f"stage_a[{candidate.name},{i}]")
    _cap(prog, ids, opt.coeff_cap)
    prog.set_objective({ids[0]: -1.0})
    sol = prog.solve(opt.settings)
    return _finish_stage(candidate, "a", i, prog, sol, frame, ids, gen_names, t0)


def synth_stage_b(candidate: HocbfCandidate, system: ControlAffineSystem, X: SemialgebraicSet,
                  U: SemialgebraicSet, clifs: Sequence[Clif] = (), context: Sequence[HocbfCandidate] = (),
                  options: Optional[SynthesisOptions] = None) -> StageResult:
    """Find alpha_r, a controller and CLIF slacks; slots 1..r-1 must be filled."""
    opt = options or SynthesisOptions()
    t0 = time.perf_counter()
    r = candidate.r
    frame = _Frame(system, X, opt.scale)
    sys_w = frame.sys_w
    chain = frame.chain_w(candidate.with_slots(list(candidate.slots[:r - 1]) + [None]))
    psi = chain.psis[-1]
    ctx = _context(frame, context, r - 1)
    gens = [g for _, g in ctx] + [psi] + list(frame.X_w.generators)
    gen_names = [n for n, _ in ctx] + [f"psi{r - 1}[{candidate.name}]"] + [f"h{k + 1}" for k in range(len(X.generators))]
    prog = SosProgram(system.space)
    clifs_w = [frame.scaling.clif_to_w(c) for c in clifs]
    u, rho_ids, clif_mems, _ = add_controller_constraints(prog, sys_w, U, clifs_w, gens, opt.deg_u)
    lhs = AffinePoly.lift(chain.lf_last)
    for q, uk in zip(chain.input_row, u):
        if not q.is_zero():
            lhs = lhs + uk * q
    n_terms = int(round(2 * candidate.half_degrees[r - 1]))
    ids = _template_vars(prog, n_terms, "a")
    for k, vid in enumerate(ids, start=1):
        lhs = lhs + AffinePoly.variable(prog.space, vid, psi ** k * (1.0 / k))
    prog.add_membership(lhs, gens, name=f"stage_b[{candidate.name}]")
    _cap(prog, ids, opt.coeff_cap)
    prog.set_objective({rid: opt.clif_weights.get(name, 1.0) for name, rid in rho_ids.items()})
    sol = prog.solve(opt.settings)
    absorb_clif_residuals(prog, sol, clif_mems, rho_ids, frame.X_w)
    res = _finish_stage(candidate, "b", r, prog, sol, frame, ids, gen_names, t0)
    if sol.ok:
        res.controller = [frame.scaling.poly_to_x(uk.collapse(sol.values)) for uk in u]
        res.rho = {name: max(0.0, sol.values[rid]) for name, rid in rho_ids.items()}
    return res


# -- drivers ------------------------------------------------------------------------


def _fill_slot(res: StageResult, candidate: HocbfCandidate, i: int, system: ControlAffineSystem,
               X: SemialgebraicSet, opt: SynthesisOptions):
    """Turn beta_{i-1} into the slot-(i-1) class-K pair (sqrt form, eta form)."""
    beta = ClassKTemplate(tuple(res.coefficients))
    chain = build_chain(candidate, system, depth=i - 1)
    psi = chain.psis[-1]
    region = X.with_generators([psi])
    zb = zeta_bar(psi, region)
    if zb <= 0:
        raise SynthesisError(f"{candidate.name}: companion set max of psi{i - 2} is {zb:.3e}; cannot scale eta")
    eta = eta_under_approx(beta, zb, sqrt2=opt.eta_sqrt2)
    linear_only = all(c == 0 for c in beta.coeffs[1:])
    sq = sqrt_from_beta(beta.coeffs[0]) if linear_only else None
    mode = opt.runtime_mode if sq is not None else "poly"
    slot = ClassKSlot(ClassKTemplate.linear(eta), sq, mode)
    return beta, zb, eta, sq, slot


def synthesize_candidate(candidate: HocbfCandidate, system: ControlAffineSystem, X: SemialgebraicSet,
                         U: SemialgebraicSet, clifs: Sequence[Clif] = (), context: Sequence[HocbfCandidate] = (),
                         options: Optional[SynthesisOptions] = None) -> SynthesizedChain:
    """Stage (a) for i = 2..r, then stage (b). Raises SynthesisError with the failing stage."""
    opt = options or SynthesisOptions()
    ok, _ = check_relative_degree(candidate.b, system, candidate.r)
    if not ok:
        raise ModelError(f"{candidate.name}: relative degree check failed for r = {candidate.r}")
    cand = candidate.with_slots([None] * candidate.r)
    betas, zbars, sqrts, etas, stages = [], [], [], [], []
    for i in range(2, candidate.r + 1):
        res = synth_stage_a(cand, i, system, X, U, context, opt)
        stages.append(res)
        err = _stage_error(res)
        if err:
            raise SynthesisError(err, stages)
        beta, zb, eta, sq, slot = _fill_slot(res, cand, i, system, X, opt)
        slots = list(cand.slots)
        slots[i - 2] = slot
        cand = cand.with_slots(slots)
        betas.append(beta)
        zbars.append(zb)
        etas.append(eta)
        sqrts.append(sq)
    res = synth_stage_b(cand, system, X, U, clifs, context, opt)
    stages.append(res)
    err = _stage_error(res)
    if err:
        raise SynthesisError(err, stages)
    alpha_r = ClassKTemplate(tuple(res.coefficients))
    slots = list(cand.slots)
    slots[-1] = ClassKSlot(alpha_r)
    cand = cand.with_slots(slots)
    return SynthesizedChain(cand, betas, zbars, sqrts, etas, alpha_r, res.controller, res.rho, stages)


def synth_all(candidates: Sequence[HocbfCandidate], system: ControlAffineSystem, X: SemialgebraicSet,
              U: SemialgebraicSet, clifs: Sequence[Clif] = (), options: Optional[SynthesisOptions] = None
              ) -> MultiSynthesisResult:
    """Synthesize candidates in order, each against the chains already built, then verify jointly."""
    opt = options or SynthesisOptions()
    t0 = time.perf_counter()
    done: List[SynthesizedChain] = []
    gen_sets: List[Dict[str, List[str]]] = []
    for cand in candidates:
        ctx = [c.candidate for c in done]
        try:
            chain = synthesize_candidate(cand, system, X, U, clifs, ctx, opt)
        except SynthesisError as exc:
            partial = exc.args[1] if len(exc.args) > 1 else []
            failed = partial[-1] if partial else None
            if partial[:-1]:
                done.append(SynthesizedChain(cand, [], [], [], [], ClassKTemplate((0.0,)), [], {}, partial[:-1]))
            return MultiSynthesisResult(done, gen_sets, None, failure=str(exc.args[0]), failed_candidate=cand.name,
                                        failed_stage=f"{failed.stage}{failed.level}" if failed else None,
                                        seconds=time.perf_counter() - t0)
        gen_sets.append({f"{s.stage}{s.level}": s.generators for s in chain.stages})
        if opt.gate == "each":
            gate = verify(VerificationProblem(system, X, U, ctx + [chain.candidate], list(clifs), opt.deg_u,
                                              opt.scale, opt.settings),
                          seed=opt.seed, audit_samples=opt.audit_samples)
            chain.gate = gate
            if not gate.verified:
                done.append(chain)
                return MultiSynthesisResult(done, gen_sets, None,
                                            failure=f"{cand.name}: soundness gate returned {gate.verdict.value} "
                                                    f"({gate.message})",
                                            failed_candidate=cand.name, failed_stage="gate",
                                            seconds=time.perf_counter() - t0)
        done.append(chain)
        log.info("synthesized %s in %.1fs", cand.name, sum(s.seconds for s in chain.stages))
    joint = done[-1].gate if (opt.gate == "each" and done) else None
    if joint is None and done and opt.gate != "none":
        joint = verify(VerificationProblem(system, X, U, [c.candidate for c in done], list(clifs), opt.deg_u,
                                           opt.scale, opt.settings), seed=opt.seed, audit_samples=opt.audit_samples)
    failure = None
    if joint is not None and not joint.verified:
        failure = f"joint verification returned {joint.verdict.value} ({joint.message})"
    return MultiSynthesisResult(done, gen_sets, joint, failure=failure, seconds=time.perf_counter() - t0)
