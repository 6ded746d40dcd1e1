import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hocbf import sdp
from hocbf.parser import parse_poly
from hocbf.poly import VarSpace, monomial_basis
from hocbf.sos import SosError, SosMultiplier, SosProgram, validate_certificate

S = VarSpace(["x", "y"], ["u"])
seeds = st.integers(0, 2 ** 32 - 1)


def psd(rng, n, rank=None):
    A = rng.normal(size=(rank or n, n))
    return A.T @ A


@settings(max_examples=50, deadline=None, derandomize=True)
@given(seeds)
def test_gram_polynomial_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    basis = monomial_basis(S, ["x", "y"], 2)
    Q = psd(rng, len(basis), rank=int(rng.integers(1, len(basis) + 1)))
    p = SosMultiplier("s", basis, 0, S.const(1.0)).poly(Q, S)
    pts = rng.uniform(-3, 3, size=(1000, 3))
    vals = p.eval_many(pts)
    scale = np.abs(Q).sum() * 81.0
    assert np.all(vals >= -1e-12 * scale)


def _known_membership(rng):
    """p = s0 + s1 g with random psd Grams, and the program whose lhs is the free polynomial p."""
    prog = SosProgram(S)
    p, ids, basis = prog.new_poly("p", 2, ["x", "y"])
    g = parse_poly("1 - x^2 - y^2", S)
    mem = prog.add_membership(p, [g], degrees=[2, 0], name="known")
    grams = [psd(rng, len(mu.basis)) for mu in mem.multipliers]
    target = S.zero()
    for mu, Q in zip(mem.multipliers, grams):
        target = target + mu.poly(Q, S) * mu.generator
    values = {i: target.coeff(tuple(e)) for i, e in zip(ids, basis)}
    return prog, p, mem, grams, values, target


@settings(max_examples=30, deadline=None, derandomize=True)
@given(seeds)
def test_coefficient_matching_is_exact(seed):
    prog, p, mem, grams, values, target = _known_membership(np.random.default_rng(seed))
    comp = prog.compile()
    P = comp.problem
    free = np.zeros(P.n_free)
    nonneg = np.zeros(P.n_nonneg)
    for vid, (kind, col) in comp.var_index.items():
        (free if kind == "free" else nonneg)[col] = values[vid]
    blocks = [None] * len(P.block_dims)
    for mu, Q in zip(mem.multipliers, grams):
        blocks[mu.block] = Q
    r = sdp.residuals(P, blocks, free, nonneg)
    assert r["primal_residual"] <= 1e-12
    # extraction through the same index map returns the assignment unchanged
    back = {vid: (free if kind == "free" else nonneg)[col] for vid, (kind, col) in comp.var_index.items()}
    assert back == values
    chk = validate_certificate(mem, p.collapse(back), grams)
    assert chk.residual <= 1e-12 and chk.min_eig >= -1e-12


def test_fixed_decision_polynomial_is_recovered():
    prog, p, mem, grams, values, target = _known_membership(np.random.default_rng(3))
    for vid, v in values.items():
        prog.add_linear({vid: 1.0}, v)
    sol = prog.solve()
    assert sol.ok
    assert prog.value(p, sol).allclose(target, 1e-7)
    assert all(c.ok() for c in prog.check_all(sol))


def test_infeasible_membership():
    prog = SosProgram(S)
    prog.add_membership(parse_poly("-1 - x^2", S), [], name="neg")
    assert prog.solve().status == sdp.Status.INFEASIBLE


def test_positivstellensatz_on_disc():
    # 1 - x^2 is not SOS but lies in the module of g = 1 - x^2 - y^2 via s1 = 1, s0 = y^2
    prog = SosProgram(S)
    prog.add_membership(parse_poly("1 - x^2", S), [parse_poly("1 - x^2 - y^2", S)], name="disc")
    sol = prog.solve()
    assert sol.ok and all(c.ok() for c in prog.check_all(sol))
    prog2 = SosProgram(S)
    prog2.add_membership(parse_poly("1 - x^2", S), [], name="plain")
    assert prog2.solve().status == sdp.Status.INFEASIBLE


def test_degree_shortfall_detected():
    prog = SosProgram(S)
    with pytest.raises(SosError, match="shortfall"):
        prog.add_membership(parse_poly("x^4", S), [], degrees=[2])


def test_inputs_must_be_composed_first():
    prog = SosProgram(S)
    with pytest.raises(SosError):
        prog.add_membership(parse_poly("u^2", S))


def test_validate_flags_negative_gram():
    prog = SosProgram(S)
    mem = prog.add_membership(parse_poly("x^2 + y^2", S), [], degrees=[2], name="m")
    N = len(mem.multipliers[0].basis)
    Q = np.zeros((N, N))
    Q[1, 1] = Q[2, 2] = 1.0
    assert validate_certificate(mem, parse_poly("x^2 + y^2", S), [Q]).ok()
    Q2 = Q.copy()
    Q2[2, 2] = -0.5
    chk = validate_certificate(mem, parse_poly("x^2 - 0.5*y^2", S), [Q2])
    assert chk.residual <= 1e-15 and not chk.ok()
