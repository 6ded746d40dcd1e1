"""Certificate files (JSON) and their independent re-validation.

A certificate stores everything the safety argument rests on: the class-K
coefficients, the zeta-bar and eta values, the controller, and for every SOS
membership of every stage its collapsed left-hand side, generators, multiplier
bases and Gram matrices (row-major). ``check_certificate`` recomputes identity
residuals and Gram eigenvalues from the stored numbers and re-runs the sample
audit against chains rebuilt from the scenario, without calling a solver.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .certifier import AUDIT_TOL, Verdict, VerificationProblem, sample_audit
from .poly import Poly, VarSpace
from .sos import CertificateCheck, Membership, SosMultiplier, validate_certificate
from .synthesizer import MultiSynthesisResult, StageResult, SynthesisOptions
from .system import ClassKSlot, ClassKTemplate, HocbfCandidate, RuntimeChain, SqrtClassK, StateScaling

FORMAT = "hocbf-certificate"
FORMAT_VERSION = 1


class CertificateError(ValueError):
    pass


def poly_to_json(p: Poly) -> List:
    return [[list(e), c] for e, c in sorted(p.terms.items())]


def poly_from_json(space: VarSpace, data) -> Poly:
    return Poly(space, {tuple(int(k) for k in e): float(c) for e, c in data}, tol=0.0)


def _slot_json(slot: ClassKSlot) -> Dict[str, Any]:
    return {"poly": list(slot.poly.coeffs), "sqrt": slot.sqrt.a if slot.sqrt else None, "mode": slot.mode}


def _slot_from_json(d) -> ClassKSlot:
    sq = SqrtClassK(float(d["sqrt"])) if d.get("sqrt") is not None else None
    return ClassKSlot(ClassKTemplate(tuple(float(c) for c in d["poly"])), sq, d.get("mode", "poly"))


def _stage_json(st: StageResult) -> Dict[str, Any]:
    prog, sol = st.program, st.solution
    mems = []
    for mem in prog.memberships:
        mults = [{"basis": [list(e) for e in mu.basis], "generator": poly_to_json(mu.generator),
                  "gram": [float(v) for v in sol.grams[mu.block].ravel()]} for mu in mem.multipliers]
        mems.append({
            "name": mem.name,
            "lhs": poly_to_json(mem.lhs.collapse(sol.values)),
            "generators": [poly_to_json(g) for g in mem.generators],
            "row_scale": [[list(e), s] for e, s in sorted(mem.row_scale.items())],
            "multipliers": mults,
        })
    checks = {c.name: {"residual": c.residual, "min_eig": c.min_eig} for c in st.checks}
    metrics = st.solution.sdp_solution.metrics if st.solution.sdp_solution else {}
    return {
        "stage": st.stage, "level": st.level, "status": st.status, "coefficients": list(st.coefficients),
        "generators": list(st.generators),
        "scaling": {"center": list(st.scaling.center), "radius": list(st.scaling.radius)},
        "checks": checks, "metrics": {k: float(v) for k, v in metrics.items()},
        "memberships": mems,
    }


def _report_json(rep) -> Optional[Dict[str, Any]]:
    if rep is None:
        return None
    return {
        "verdict": rep.verdict.value, "message": rep.message, "rho": dict(rep.rho),
        "controller": [poly_to_json(u) for u in rep.controller],
        "audit": None if rep.audit is None else {"accepted": rep.audit.accepted, "minima": rep.audit.minima},
        "sdp_status": rep.sdp_status,
    }


def to_json(result: MultiSynthesisResult, scenario, options: SynthesisOptions) -> Dict[str, Any]:
    settings = options.settings.__dict__
    opts = {k: v for k, v in options.__dict__.items() if k != "settings"}
    cands = []
    for ch in result.chains:
        cands.append({
            "name": ch.candidate.name, "r": ch.candidate.r,
            "slots": [_slot_json(s) if s is not None else None for s in ch.candidate.slots],
            "betas": [list(b.coeffs) for b in ch.betas], "zeta_bars": list(ch.zeta_bars), "etas": list(ch.etas),
            "alpha_r": list(ch.alpha_r.coeffs), "rho": dict(ch.rho),
            "controller": [poly_to_json(u) for u in ch.controller],
            "gate": _report_json(ch.gate),
            "stages": [_stage_json(s) for s in ch.stages],
        })
    return {
        "format": FORMAT, "version": FORMAT_VERSION, "tool_version": __version__,
        "scenario": scenario.name, "scenario_table": scenario.raw,
        "variables": {"states": list(scenario.space.states), "inputs": list(scenario.space.inputs)},
        "options": opts, "solver_settings": settings,
        "ok": result.ok, "failure": result.failure, "failed_candidate": result.failed_candidate,
        "failed_stage": result.failed_stage,
        "sdp_count": result.sdp_count, "class_k_count": result.class_k_count(),
        "candidates": cands, "joint": _report_json(result.joint),
    }


def save(cert: Dict[str, Any], path) -> None:
    Path(path).write_text(json.dumps(cert, indent=1, sort_keys=True))


def load(path) -> Dict[str, Any]:
    try:
        cert = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CertificateError(f"{path}: {exc}") from None
    if cert.get("format") != FORMAT or cert.get("version") != FORMAT_VERSION:
        raise CertificateError(f"{path}: not a version-{FORMAT_VERSION} {FORMAT} file")
    return cert


def candidates_from(cert: Dict[str, Any], scenario) -> List[HocbfCandidate]:
    """Scenario candidates with the certificate's class-K slots filled in."""
    by_name = {c.name: c for c in scenario.candidates}
    out = []
    for cd in cert["candidates"]:
        base = by_name.get(cd["name"])
        if base is None:
            raise CertificateError(f"candidate {cd['name']} is not part of scenario {scenario.name}")
        if base.r != cd["r"] or any(s is None for s in cd["slots"]):
            raise CertificateError(f"candidate {cd['name']} is incomplete in the certificate")
        out.append(base.with_slots([_slot_from_json(s) for s in cd["slots"]]))
    return out


def runtime_chains(cert: Dict[str, Any], scenario) -> List[RuntimeChain]:
    return [RuntimeChain(c, scenario.system) for c in candidates_from(cert, scenario)]


def controller_from(cert: Dict[str, Any], scenario) -> List[Poly]:
    joint = cert.get("joint") or {}
    return [poly_from_json(scenario.space, u) for u in joint.get("controller", [])]


@dataclass
class CheckReport:
    checks: List[CertificateCheck] = field(default_factory=list)
    audit_minima: Dict[str, float] = field(default_factory=dict)
    audit_accepted: int = 0
    problems: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def to_json(self) -> Dict[str, Any]:
        return {"ok": self.ok, "problems": list(self.problems), "audit_accepted": self.audit_accepted,
                "audit_minima": dict(self.audit_minima),
                "checks": [{"name": c.name, "residual": c.residual, "min_eig": c.min_eig} for c in self.checks]}


def _membership(space: VarSpace, md) -> tuple:
    mults, grams = [], []
    for k, mu in enumerate(md["multipliers"]):
        basis = [tuple(int(v) for v in e) for e in mu["basis"]]
        N = len(basis)
        mults.append(SosMultiplier(f"{md['name']}.s{k}", basis, k, poly_from_json(space, mu["generator"])))
        grams.append(np.asarray(mu["gram"], dtype=float).reshape(N, N))
    mem = Membership(md["name"], None, [poly_from_json(space, g) for g in md["generators"]], mults)
    mem.row_scale = {tuple(int(v) for v in e): float(s) for e, s in md["row_scale"]}
    return mem, poly_from_json(space, md["lhs"]), grams


def check_certificate(cert: Dict[str, Any], scenario, audit_samples: int = 5000, seed: int = 0) -> CheckReport:
    """Recompute every stored certificate and re-audit the stored joint controller."""
    rep = CheckReport()
    space = scenario.space
    if cert["variables"] != {"states": list(space.states), "inputs": list(space.inputs)}:
        rep.problems.append("certificate variables do not match the scenario")
        return rep
    if not cert.get("ok"):
        rep.problems.append(f"the producing run did not succeed: {cert.get('failure')}")
    for cd in cert["candidates"]:
        for st in cd["stages"]:
            for md in st["memberships"]:
                mem, lhs, grams = _membership(space, md)
                chk = validate_certificate(mem, lhs, grams)
                chk.name = f"{cd['name']}:{st['stage']}{st['level']}:{md['name']}"
                rep.checks.append(chk)
                if not chk.ok():
                    rep.problems.append(f"{chk.name}: residual {chk.residual:.3e}, min eig {chk.min_eig:.3e}")
    try:
        cands = candidates_from(cert, scenario)
    except CertificateError as exc:
        rep.problems.append(str(exc))
        return rep
    u = controller_from(cert, scenario)
    if len(u) != space.m:
        rep.problems.append("certificate has no joint controller")
        return rep
    joint = cert.get("joint") or {}
    problem = VerificationProblem(scenario.system, scenario.X, scenario.U, cands, list(scenario.clifs))
    audit = sample_audit(problem, u, {k: float(v) for k, v in joint.get("rho", {}).items()}, audit_samples, seed)
    rep.audit_minima = audit.minima
    rep.audit_accepted = audit.accepted
    if audit.accepted == 0:
        rep.problems.append("no audit sample lies in the certified region")
    elif audit.worst < -AUDIT_TOL:
        worst = min(audit.minima, key=audit.minima.get)
        rep.problems.append(f"audit violation {audit.minima[worst]:.3e} in {worst}")
    if joint.get("verdict") != Verdict.VERIFIED.value:
        rep.problems.append(f"stored joint verdict is {joint.get('verdict')}")
    return rep


def verification_report_json(report, scenario, problem: VerificationProblem) -> Dict[str, Any]:
    out = _report_json(report)
    out.update({"format": "hocbf-verification", "version": FORMAT_VERSION, "tool_version": __version__,
                "scenario": scenario.name,
                "candidates": [{"name": c.name, "slots": [_slot_json(s) for s in c.slots]} for c in problem.candidates],
                "checks": [{"name": c.name, "residual": c.residual, "min_eig": c.min_eig} for c in report.checks],
                "sdp_metrics": {k: float(v) for k, v in report.sdp_metrics.items()}})
    return out
