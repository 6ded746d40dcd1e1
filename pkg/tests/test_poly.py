import math

import numpy as np
import pytest
from hypothesis import given, settings

from hocbf.poly import (AffinePoly, Poly, PolyError, VarSpace, affine_change, basis_size, grad, lie, lie_mat,
                        monomial_basis, substitute)
from conftest import SPACE, abs_eval, points, polys

MANY = settings(max_examples=1000, deadline=None, derandomize=True)


def close(a, b, scale, rel):
    return abs(a - b) <= rel * max(1.0, scale)


@MANY
@given(polys(), polys(), polys(), points())
def test_ring_laws_pointwise(p, q, r, x):
    s = 1.0 + abs_eval(p, x) * (abs_eval(q, x) + abs_eval(r, x)) + abs_eval(q, x) * abs_eval(r, x)
    s += abs_eval(p, x) + abs_eval(q, x) + abs_eval(r, x)
    assert close((p + q)(x), (q + p)(x), s, 1e-10)
    assert close((p * q)(x), (q * p)(x), s, 1e-10)
    assert close(((p + q) + r)(x), (p + (q + r))(x), s, 1e-10)
    assert close(((p * q) * r)(x), (p * (q * r))(x), abs_eval(p, x) * abs_eval(q, x) * abs_eval(r, x), 1e-10)
    assert close((p * (q + r))(x), (p * q + p * r)(x), s, 1e-10)
    assert close((p * q)(x), p(x) * q(x), s, 1e-10)


@MANY
@given(polys(), points())
def test_gradient_matches_central_differences(p, x):
    for k, gk in enumerate(grad(p)):
        h = 1e-5 * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fd = (p(xp) - p(xm)) / (2 * h)
        assert close(gk(x), fd, abs_eval(gk, x) + abs_eval(p, x), 1e-6)


@MANY
@given(polys(), polys(), polys(), polys(), points())
def test_lie_is_gradient_dot_field(p, f1, f2, f3, x):
    field = [f1, f2, f3]
    val = lie(p, field)(x)
    ref = sum(g(x) * f(x) for g, f in zip(grad(p), field))
    scale = sum(abs_eval(g, x) * abs_eval(f, x) for g, f in zip(grad(p), field))
    assert close(val, ref, scale, 1e-12)


def test_lie_mat_row():
    S = VarSpace(["x1", "x2"], ["u"])
    x1, x2, _ = S.vars()
    row = lie_mat(x1 ** 2 + x1 * x2, [[S.zero()], [S.const(1.0)]])
    assert row[0] == x1


@pytest.mark.parametrize("v,d", [(1, 0), (1, 5), (2, 3), (3, 4), (4, 2), (7, 3)])
def test_monomial_basis_count(v, d):
    S = VarSpace([f"s{k}" for k in range(v)])
    basis = monomial_basis(S, max_degree=d)
    assert len(basis) == math.comb(d + v, v) == basis_size(v, d)
    assert len(set(basis)) == len(basis)


def test_monomial_basis_is_graded():
    S = VarSpace(["x", "y"])
    assert [tuple(m) for m in monomial_basis(S, max_degree=2)] == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


@settings(max_examples=200, deadline=None, derandomize=True)
@given(polys(), polys(), polys(), points())
def test_affine_collapse_matches_direct_build(c, a, b, x):
    e = AffinePoly.lift(c) + AffinePoly.variable(SPACE, 0, a) + AffinePoly.variable(SPACE, 1, b) * 2.0
    vals = {0: 0.75, 1: -1.5}
    direct = c + a * 0.75 + b * (-3.0)
    got = e.collapse(vals)
    assert got.allclose(direct, 1e-12)
    assert close(got(x), direct(x), abs_eval(direct, x), 1e-12)


def test_affine_product_of_decisions_is_rejected():
    a = AffinePoly.variable(SPACE, 0)
    with pytest.raises(PolyError):
        a * a


@settings(max_examples=200, deadline=None, derandomize=True)
@given(polys(), points())
def test_affine_change_is_substitution(p, w):
    center, radius = {0: 1.5, 2: -0.5}, {0: 2.0, 2: 0.25}
    q = affine_change(p, center, radius)
    x = w.copy()
    for i in center:
        x[i] = center[i] + radius[i] * w[i]
    assert close(q(w), p(x), abs_eval(p, np.abs(x) + 1), 1e-10)


def test_substitute_matches_expansion():
    S = VarSpace(["x", "y"])
    x, y = S.vars()
    p = substitute(x ** 2 + y, {"x": y + 1})
    assert p == y ** 2 + 3 * y + 1


def test_negative_power_rejected():
    x = SPACE.var("x")
    with pytest.raises(PolyError):
        x ** -1


def test_mixed_spaces_rejected():
    other = VarSpace(["a"])
    with pytest.raises(PolyError):
        SPACE.var("x") + other.var("a")


def test_eval_many_matches_pointwise(rng):
    p = Poly(SPACE, {(2, 1, 0, 0): 3.0, (0, 0, 3, 0): -1.0, (0, 0, 0, 0): 0.5})
    P = rng.normal(size=(50, 4))
    assert np.allclose(p.eval_many(P), [p(r) for r in P], rtol=1e-14, atol=1e-14)
