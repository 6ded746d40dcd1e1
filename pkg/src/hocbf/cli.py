"""Command-line entry point: ``hocbf verify|synthesize|simulate|check``.

Exit codes: 0 success, 1 infeasible / not verified / unsafe, 2 input error,
3 numerical failure. Every command writes a JSON report, even on failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from . import certificate as certfile
from . import scenario as scen
from .certifier import Verdict, VerificationProblem, verify
from .parser import ParseError
from .plot import emit_svg, trajectories_csv
from .poly import PolyError
from .runtime import ClosedLoop, monitor, simulate
from .synthesizer import synth_all
from .system import ModelError

log = logging.getLogger("hocbf")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
INPUT_ERRORS = (scen.ScenarioError, certfile.CertificateError, ParseError, PolyError, ModelError, OSError)


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _default_report(args, suffix: str) -> str:
    stem = Path(args.scenario).stem if args.scenario else "hocbf"
    return f"{stem}-{suffix}.json"


def cmd_verify(args) -> int:
    sc = scen.load(args.scenario)
    opts = sc.synthesis_options()
    settings = opts.settings
    if args.tol is not None:
        settings.tol_feas = settings.tol_gap = args.tol
    deg_u = opts.deg_u if args.deg_u is None else args.deg_u
    problem = VerificationProblem(sc.system, sc.X, sc.U, sc.verification_candidates(), list(sc.clifs),
                                  deg_u, opts.scale, settings)
    report = verify(problem, seed=sc.seed, audit_samples=opts.audit_samples)
    out = certfile.verification_report_json(report, sc, problem)
    path = args.report or _default_report(args, "verify")
    _write_json(path, out)
    print(f"{report.verdict.value}: {report.message}" if report.message else report.verdict.value)
    print(f"report written to {path}")
    if report.verified:
        return EXIT_OK
    if report.verdict == Verdict.NUMERICAL_FAILURE:
        return EXIT_NUMERIC
    if report.verdict == Verdict.INFEASIBLE:
        print("hint: raise --deg-u or the multiplier degrees and retry", file=sys.stderr)
    return EXIT_FAIL


def cmd_synthesize(args) -> int:
    sc = scen.load(args.scenario)
    override = {}
    if args.stage_a_input:
        override["stage_a_input"] = args.stage_a_input
    opts = sc.synthesis_options(**override)
    t0 = time.perf_counter()
    result = synth_all(sc.candidates, sc.system, sc.X, sc.U, sc.clifs, opts)
    elapsed = time.perf_counter() - t0
    cert = certfile.to_json(result, sc, opts)
    path = args.out or f"{Path(args.scenario).stem}-cert.json"
    certfile.save(cert, path)
    for st in result.stages:
        print(f"{st.candidate}:{st.stage}{st.level} {st.status} residual {st.max_residual:.2e} "
              f"min eig {st.min_eig:.2e}")
    print(f"{result.sdp_count} SDPs, {result.class_k_count()} class-K functions, {elapsed:.1f}s")
    print(f"certificate written to {path}")
    if result.ok:
        return EXIT_OK
    print(f"synthesis failed: {result.failure}", file=sys.stderr)
    if result.failed_stage and result.failed_stage != "gate":
        print("hint: raise the multiplier degrees or the template sizes and retry", file=sys.stderr)
    numeric = "NumericalFailure" in (result.failure or "") or "NumericalError" in (result.failure or "")
    return EXIT_NUMERIC if numeric else EXIT_FAIL


def _read_ics(path: str, n: int) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        fields = [f.strip() for f in line.replace(";", ",").split(",") if f.strip()]
        if not fields or fields[0].startswith("#"):
            continue
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            if rows:
                raise scen.ScenarioError(f"{path}: non-numeric row {line!r}") from None
            continue  # header
    if not rows or any(len(r) != n for r in rows):
        raise scen.ScenarioError(f"{path}: expected rows of {n} numbers")
    return np.array(rows)


def cmd_simulate(args) -> int:
    sc = scen.load(args.scenario)
    cert = certfile.load(args.cert)
    chains = certfile.runtime_chains(cert, sc)
    ics = sc.initial_conditions(args.seed) if args.ics == "grid" else _read_ics(args.ics, sc.space.n)
    loop = ClosedLoop(sc.system, chains, list(sc.clifs), sc.U, sc.goal, sc.speed, sc.nominal(),
                      sc.runtime_options(dt=args.dt, horizon=args.horizon))
    trajs, runs, skipped = [], [], []
    for k, x0 in enumerate(ics):
        try:
            tr = simulate(loop, x0)
        except ValueError as exc:
            skipped.append({"index": k, "x0": [float(v) for v in x0], "reason": str(exc)})
            continue
        summ = monitor(tr, chains)
        lo, hi = np.array(sc.U.lo), np.array(sc.U.hi)
        in_box = bool(np.all(tr.inputs >= lo) and np.all(tr.inputs <= hi))
        trajs.append(tr)
        runs.append({"index": k, "x0": [float(v) for v in x0], "termination": tr.termination.value,
                     "steps": len(tr) - 1, "safe": summ.safe, "inputs_in_box": in_box,
                     "min_psi0": summ.min_psi0, "minima": summ.minima})
    unsafe = [r["index"] for r in runs if not (r["safe"] and r["inputs_in_box"])]
    out = {"format": "hocbf-simulation", "version": 1, "tool_version": __version__, "scenario": sc.name,
           "seed": sc.seed if args.seed is None else args.seed, "runs": runs, "skipped": skipped,
           "unsafe": unsafe}
    csv_path = args.out or f"{Path(args.scenario).stem}-traj.csv"
    Path(csv_path).write_text(trajectories_csv(sc, trajs))
    if args.plot and trajs:
        Path(args.plot).write_text(emit_svg(sc, trajs))
    report = args.report or _default_report(args, "simulate")
    _write_json(report, out)
    for r in runs:
        print(f"run {r['index']}: {r['termination']}, {r['steps']} steps, min psi0 {r['min_psi0']:.4g}"
              + ("" if r["safe"] and r["inputs_in_box"] else "  UNSAFE"))
    for s in skipped:
        print(f"skipped {s['index']}: {s['reason']}")
    print(f"{len(runs)} runs, {len(skipped)} skipped, {len(unsafe)} unsafe; trajectories in {csv_path}")
    if not runs:
        return EXIT_INPUT
    return EXIT_OK if not unsafe else EXIT_FAIL


def cmd_check(args) -> int:
    sc = scen.load(args.scenario)
    cert = certfile.load(args.cert)
    rep = certfile.check_certificate(cert, sc)
    path = args.report or f"{Path(args.cert).stem}-check.json"
    _write_json(path, rep.to_json())
    worst = max((c.residual for c in rep.checks), default=0.0)
    low = min((c.min_eig for c in rep.checks), default=0.0)
    print(f"{len(rep.checks)} memberships, worst residual {worst:.2e}, min eig {low:.2e}, "
          f"{rep.audit_accepted} audit samples")
    for p in rep.problems:
        print(f"problem: {p}")
    print("certificate OK" if rep.ok else "certificate REJECTED")
    return EXIT_OK if rep.ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hocbf", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="verify fixed class-K gains with a polynomial controller")
    p.add_argument("scenario", help="scenario file or built-in name")
    p.add_argument("--deg-u", type=int, default=None, help="controller degree")
    p.add_argument("--tol", type=float, default=None, help="SDP feasibility and gap tolerance")
    p.add_argument("--report", default=None, help="JSON report path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synthesize", help="synthesize class-K functions for every candidate")
    p.add_argument("scenario")
    p.add_argument("--stage-a-input", choices=["drift", "decision"], default=None)
    p.add_argument("--out", default=None, help="certificate path")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="run the QP filter from a certificate")
    p.add_argument("scenario")
    p.add_argument("--cert", required=True)
    p.add_argument("--ics", default="grid", help="'grid' (scenario initial conditions) or a CSV file")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="trajectory CSV path")
    p.add_argument("--plot", default=None, help="SVG path")
    p.add_argument("--report", default=None, help="JSON report path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="re-validate a stored certificate")
    p.add_argument("cert")
    p.add_argument("--scenario", required=True)
    p.add_argument("--report", default=None, help="JSON report path")
    p.set_defaults(func=cmd_check)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_json(getattr(args, "report", None) or f"hocbf-{args.command}-error.json",
                    {"format": "hocbf-error", "command": args.command, "error": str(exc), "exit_code": EXIT_INPUT})
        return EXIT_INPUT
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
