import numpy as np
import pytest

from hocbf import scenario
from hocbf.certifier import (Verdict, VerificationProblem, sample_audit, split_affine_in_inputs, verify,
                             verify_multi, verify_single)
from hocbf.sos import SosMultiplier
from hocbf.system import ClassKSlot, ClassKTemplate, SemialgebraicSet

DI = scenario.load("double_integrator")
GAINS = [0.25, 0.5, 1.0, 2.0, 4.0]


def di_problem(a1, a2, U=None, **kw):
    cand = DI.candidates[0].with_slots([ClassKSlot(ClassKTemplate.linear(a1)), ClassKSlot(ClassKTemplate.linear(a2))])
    return VerificationProblem(DI.system, DI.X, U or DI.U, [cand], list(DI.clifs), **kw)


def brute_force_sup_psi2(a1, a2, n=201):
    """min over the 201^2 grid of C_2 and X of max over u in {-1, 1} of psi_2.

    psi_2 = u + a1 x2 + a2 (x2 + a1 x1), affine in u, so the supremum over the
    interval sits at an endpoint.
    """
    x1, x2 = np.meshgrid(np.linspace(-2, 2, n), np.linspace(-2, 2, n), indexing="ij")
    inside = (x1 >= 0) & (x2 + a1 * x1 >= 0)
    base = a1 * x2 + a2 * (x2 + a1 * x1)
    sup = np.maximum(base + 1.0, base - 1.0)
    return float(sup[inside].min())


_SWEEP = {}


def sweep():
    if not _SWEEP:
        for a1 in GAINS:
            for a2 in GAINS:
                _SWEEP[(a1, a2)] = verify_single(di_problem(a1, a2))
    return _SWEEP


def test_oracle_sanity():
    # hand check: a1 = a2 = 1 gives psi_2 >= 1 + 2 x2 + x1 on x1 >= 0, x2 >= -x1, worst at x1 = 2, x2 = -2
    assert brute_force_sup_psi2(1.0, 1.0) == pytest.approx(-1.0)
    # a1 = a2 = 0.25: 1 + x2/2 + x1/16, worst at x1 = 2, x2 = -1/2
    assert brute_force_sup_psi2(0.25, 0.25) == pytest.approx(0.875)


def test_double_integrator_sweep_has_no_false_positives():
    verified = 0
    for (a1, a2), rep in sweep().items():
        if rep.verified:
            verified += 1
            assert brute_force_sup_psi2(a1, a2) >= -1e-6, (a1, a2)
    assert verified >= 1


def test_verified_reports_pass_audit():
    for rep in sweep().values():
        if rep.verified:
            assert rep.audit.accepted > 0 and rep.audit.worst >= -1e-6
            assert all(c.ok() for c in rep.checks)
            assert all(v >= 0 for v in rep.rho.values())


def test_large_gains_are_not_verified():
    # at a1 = a2 = 4 the input box cannot hold psi_2 >= 0 near x1 = 2, x2 = -2
    assert brute_force_sup_psi2(4.0, 4.0) < 0
    assert not sweep()[(4.0, 4.0)].verified


def test_multipliers_are_sos_objects():
    rep = sweep()[(0.5, 0.5)]
    assert rep.verified
    for mem in rep.memberships:
        assert mem.multipliers and all(isinstance(mu, SosMultiplier) for mu in mem.multipliers)
        assert len(mem.multipliers) == len(mem.generators) + 1


def test_rho_monotone_in_input_box():
    rhos = []
    for k in (1.0, 2.0, 4.0):
        U = SemialgebraicSet.box(DI.space, ["u"], [-k], [k], form="linear")
        rep = verify(di_problem(0.5, 0.5, U))
        assert rep.verified
        rhos.append(sum(rep.rho.values()))
    assert rhos[1] <= rhos[0] + 1e-6 and rhos[2] <= rhos[1] + 1e-6


def test_single_and_multi_agree():
    p = di_problem(1.0, 0.5)
    assert verify_single(p).verdict == verify_multi(p).verdict


def test_split_affine_in_inputs():
    from hocbf.parser import parse_poly
    c = parse_poly("3 - x1*u + 2*u", DI.space)
    c0, row = split_affine_in_inputs(c)
    assert c0 == parse_poly("3", DI.space)
    assert row[0] == parse_poly("2 - x1", DI.space)


def test_audit_detects_bad_controller():
    p = di_problem(0.5, 0.5)
    bad = [DI.space.const(-1.0)]  # always brake hard: violates psi_2 near x1 = 0, x2 = 0
    audit = sample_audit(p, bad, {"V": 0.0}, 2000, 0)
    assert audit.minima["hocbf[wall]"] < -1e-6


def test_sweep_matches_oracle_sign():
    # on this family the SOS relaxation is tight: verified exactly where the grid oracle is nonnegative
    for (a1, a2), rep in sweep().items():
        assert rep.verified == (brute_force_sup_psi2(a1, a2) >= 0), (a1, a2)
