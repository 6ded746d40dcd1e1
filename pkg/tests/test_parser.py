import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hocbf.parser import (BinOp, Neg, Num, ParseError, Pow, Var, evaluate_ast, format_ast, format_poly, lower,
                          parse_ast, parse_poly)
from hocbf.poly import VarSpace

S = VarSpace(["x", "y"], ["u"])
NAMES = ["x", "y", "u"]

leaf = st.one_of(st.floats(-3, 3, allow_nan=False).map(lambda v: Num(round(v, 6))), st.sampled_from(NAMES).map(Var))
asts = st.recursive(
    leaf,
    lambda kids: st.one_of(
        kids.map(Neg),
        st.tuples(st.sampled_from("+-*"), kids, kids).map(lambda t: BinOp(*t)),
        st.tuples(kids, st.integers(0, 3)).map(lambda t: Pow(*t)),
    ),
    max_leaves=8,
)


def test_simple_expansion():
    p = parse_poly("x^2 - 1", S)
    assert p.terms == {(2, 0, 0): 1.0, (0, 0, 0): -1.0}


def test_circle_expansion():
    # hand expansion: 35^2 + 25^2 - 49 = 1801
    p = parse_poly("(x-35)^2 + (y-25)^2 - 49", S)
    assert p.terms == {(2, 0, 0): 1.0, (1, 0, 0): -70.0, (0, 2, 0): 1.0, (0, 1, 0): -50.0, (0, 0, 0): 1801.0}


@pytest.mark.parametrize("text", ["x^-1", "x^1.5", "2x", "x y", "(x + 1", "x +", "", "   ", "x ** 2", "x^y"])
def test_rejected(text):
    with pytest.raises(ParseError):
        parse_poly(text, S)


def test_unknown_identifier():
    with pytest.raises(ParseError, match="unknown variable"):
        parse_poly("x + w", S)


def test_error_position():
    with pytest.raises(ParseError) as info:
        parse_poly("x +\n  * y", S)
    assert (info.value.line, info.value.col) == (2, 3)


def test_unary_minus_binds_to_base():
    # base := '-' base, so the exponent applies to the negated base
    assert parse_poly("-x^2", S) == S.var("x") ** 2
    assert parse_poly("0 - x^2", S) == -(S.var("x") ** 2)
    assert parse_poly("--x", S) == S.var("x")


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(asts, st.lists(st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3), min_size=10, max_size=10))
def test_print_parse_round_trip(node, pts):
    text = format_ast(node)
    again = parse_ast(text)
    poly = lower(again, S)
    for pt in pts:
        env = dict(zip(NAMES, pt))
        want = evaluate_ast(node, env)
        scale = max(1.0, abs(want))
        assert abs(evaluate_ast(again, env) - want) <= 1e-10 * scale
        assert abs(poly(pt) - want) <= 1e-10 * max(scale, _magnitude(node, env))


def _magnitude(node, env):
    """Evaluation with every operation made additive in absolute value."""
    if isinstance(node, Num):
        return abs(node.value)
    if isinstance(node, Var):
        return abs(env[node.name])
    if isinstance(node, Neg):
        return _magnitude(node.arg, env)
    if isinstance(node, Pow):
        return _magnitude(node.base, env) ** node.exp
    a, b = _magnitude(node.left, env), _magnitude(node.right, env)
    return a * b if node.op == "*" else a + b


@settings(max_examples=300, deadline=None, derandomize=True)
@given(asts)
def test_format_poly_round_trip(node):
    p = lower(node, S)
    q = parse_poly(format_poly(p), S) if not p.is_zero() else p
    assert q.allclose(p, 1e-12)
