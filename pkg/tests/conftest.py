import numpy as np
import pytest
from hypothesis import strategies as st

from hocbf.poly import Poly, VarSpace

SPACE = VarSpace(["x", "y", "z"], ["u"])

coef = st.floats(-5, 5, allow_nan=False).filter(lambda c: abs(c) > 1e-3)
exponent = st.tuples(*[st.integers(0, 3)] * 3, st.just(0))


@st.composite
def polys(draw, space=SPACE, max_terms=6):
    terms = draw(st.dictionaries(exponent, coef, min_size=1, max_size=max_terms))
    return Poly(space, terms, tol=0.0)


@st.composite
def points(draw, dim=4, bound=2.0):
    return np.array(draw(st.lists(st.floats(-bound, bound, allow_nan=False), min_size=dim, max_size=dim)))


def abs_eval(p: Poly, x) -> float:
    """Sum of |c| |x|^e, a scale for relative comparisons."""
    ax = np.abs(np.asarray(x, dtype=float))
    return float(sum(abs(c) * np.prod(ax ** np.array(e)) for e, c in p.terms.items()))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        verdict, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
