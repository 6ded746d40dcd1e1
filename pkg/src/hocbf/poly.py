"""Sparse multivariate polynomials over a fixed, named variable space.

Polynomials are immutable maps from exponent tuples to float coefficients.
Every polynomial in a problem shares one :class:`VarSpace`; state variables
come first and input symbols (used only inside input-constraint polynomials)
come last.
"""
from __future__ import annotations

import math
from itertools import combinations_with_replacement
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

DROP_TOL = 1e-14
MAX_DEGREE_PER_VAR = 64

Exponent = Tuple[int, ...]


class PolyError(ValueError):
    pass


class VarSpace:
    """Ordered, immutable list of variable names (states first, then inputs)."""

    __slots__ = ("states", "inputs", "names", "_index")

    def __init__(self, states: Sequence[str], inputs: Sequence[str] = ()):
        names = tuple(states) + tuple(inputs)
        if len(set(names)) != len(names):
            raise PolyError(f"duplicate variable names in {names}")
        for name in names:
            if not name or not (name[0].isalpha() or name[0] == "_"):
                raise PolyError(f"invalid variable name {name!r}")
        self.states = tuple(states)
        self.inputs = tuple(inputs)
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def m(self) -> int:
        return len(self.inputs)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise PolyError(f"unknown variable {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        return self is other or (
            isinstance(other, VarSpace)
            and self.states == other.states
            and self.inputs == other.inputs
        )

    def __hash__(self) -> int:
        return hash((self.states, self.inputs))

    def __repr__(self) -> str:
        return f"VarSpace(states={list(self.states)}, inputs={list(self.inputs)})"

    def zero(self) -> "Poly":
        return Poly(self, {})

    def const(self, c: float) -> "Poly":
        return Poly(self, {(0,) * len(self.names): float(c)})

    def var(self, name: str) -> "Poly":
        e = [0] * len(self.names)
        e[self.index(name)] = 1
        return Poly(self, {tuple(e): 1.0})

    def vars(self) -> List["Poly"]:
        return [self.var(n) for n in self.names]

    def monomial(self, exps: Exponent) -> "Poly":
        return Poly(self, {tuple(exps): 1.0})


class Monomial(tuple):
    """Exponent vector with graded-lexicographic ordering.

    Ties within a degree are broken by declaration order, so for variables
    (x, y) the degree-one block sorts as x before y.
    """

    __slots__ = ()

    @property
    def total_degree(self) -> int:
        return sum(self)

    def key(self):
        return grlex_key(self)

    def __lt__(self, other):
        return grlex_key(self) < grlex_key(other)

    def __le__(self, other):
        return grlex_key(self) <= grlex_key(other)

    def __gt__(self, other):
        return grlex_key(self) > grlex_key(other)

    def __ge__(self, other):
        return grlex_key(self) >= grlex_key(other)


def grlex_key(e: Exponent):
    return (sum(e), tuple(-k for k in e))


def _add_exp(a: Exponent, b: Exponent) -> Exponent:
    return tuple(x + y for x, y in zip(a, b))


class Poly:
    """Sparse polynomial; ``terms`` maps exponent tuples to coefficients."""

    __slots__ = ("space", "terms", "_arrays")

    def __init__(self, space: VarSpace, terms: Mapping[Exponent, float], *, tol: Optional[float] = None):
        nv = len(space)
        clean: Dict[Exponent, float] = {}
        if terms:
            scale = max(abs(c) for c in terms.values())
            cut = DROP_TOL * scale if tol is None else tol
            for e, c in terms.items():
                if len(e) != nv:
                    raise PolyError(f"exponent {e} does not match {nv} variables")
                c = float(c)
                if c != 0.0 and abs(c) > cut:
                    if max(e, default=0) > MAX_DEGREE_PER_VAR:
                        raise PolyError(f"degree {max(e)} exceeds per-variable bound {MAX_DEGREE_PER_VAR}")
                    clean[tuple(e)] = c
        self.space = space
        self.terms = clean
        self._arrays = None

    # -- construction helpers ------------------------------------------------

    def _new(self, terms, tol=None) -> "Poly":
        return Poly(self.space, terms, tol=tol)

    def _check(self, other: "Poly"):
        if other.space is not self.space and other.space != self.space:
            raise PolyError("polynomials live in different variable spaces")

    def _coerce(self, other) -> "Poly":
        if isinstance(other, Poly):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.space.const(float(other))
        return NotImplemented

    # -- queries -------------------------------------------------------------

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def degree_in(self, idx: Iterable[int]) -> int:
        idx = list(idx)
        return max((sum(e[i] for i in idx) for e in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def coeff(self, e: Exponent) -> float:
        return self.terms.get(tuple(e), 0.0)

    def monomials(self) -> List[Exponent]:
        return sorted(self.terms, key=grlex_key)

    def uses(self) -> List[int]:
        """Indices of variables that appear with a positive exponent."""
        used = set()
        for e in self.terms:
            used.update(i for i, k in enumerate(e) if k)
        return sorted(used)

    def is_constant(self) -> bool:
        return all(not any(e) for e in self.terms)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return self._new({e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, -other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(other, -self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(1.0 / float(other))
        return NotImplemented

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise PolyError("polynomial powers must be nonnegative integers")
        result = self.space.const(1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    def scale(self, a: float) -> "Poly":
        if a == 0.0:
            return self.space.zero()
        return self._new({e: a * c for e, c in self.terms.items()})

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = self.space.const(other)
        if not isinstance(other, Poly):
            return NotImplemented
        return self.space == other.space and self.terms == other.terms

    __hash__ = None

    def allclose(self, other: "Poly", tol: float = 1e-12) -> bool:
        self._check(other)
        d = self - other
        return d.max_abs_coeff() <= tol * max(1.0, self.max_abs_coeff(), other.max_abs_coeff())

    # -- evaluation ----------------------------------------------------------

    def _as_arrays(self):
        if self._arrays is None:
            mons = list(self.terms)
            exps = np.array(mons, dtype=np.int64).reshape(len(mons), len(self.space))
            coefs = np.array([self.terms[e] for e in mons], dtype=float)
            self._arrays = (exps, coefs)
        return self._arrays

    def __call__(self, point) -> float:
        return evaluate(self, point)

    def eval_many(self, points) -> np.ndarray:
        """Evaluate at each row of ``points`` (shape N x len(space))."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != len(self.space):
            raise PolyError(f"points have {pts.shape[1]} columns, expected {len(self.space)}")
        exps, coefs = self._as_arrays()
        if coefs.size == 0:
            return np.zeros(pts.shape[0])
        out = np.zeros(pts.shape[0])
        for k in range(coefs.size):
            term = np.full(pts.shape[0], coefs[k])
            for i, p in enumerate(exps[k]):
                if p:
                    term = term * pts[:, i] ** p
            out += term
        return out

    # -- calculus ------------------------------------------------------------

    def diff(self, var) -> "Poly":
        return partial(self, var)

    def __repr__(self) -> str:
        return f"Poly({to_string(self)!r})"

    def __str__(self) -> str:
        return to_string(self)


# -- module-level operations --------------------------------------------------


def add(p: Poly, q: Poly) -> Poly:
    p._check(q)
    out = dict(p.terms)
    for e, c in q.terms.items():
        out[e] = out.get(e, 0.0) + c
    scale = max(p.max_abs_coeff(), q.max_abs_coeff())
    return Poly(p.space, out, tol=DROP_TOL * scale)


def mul(p: Poly, q: Poly) -> Poly:
    p._check(q)
    out: Dict[Exponent, float] = {}
    for e1, c1 in p.terms.items():
        for e2, c2 in q.terms.items():
            e = _add_exp(e1, e2)
            out[e] = out.get(e, 0.0) + c1 * c2
    scale = p.max_abs_coeff() * q.max_abs_coeff()
    return Poly(p.space, out, tol=DROP_TOL * scale)


def _var_index(p: Poly, var) -> int:
    if isinstance(var, str):
        return p.space.index(var)
    i = int(var)
    if not 0 <= i < len(p.space):
        raise PolyError(f"variable index {i} out of range")
    return i


def partial(p: Poly, var) -> Poly:
    """Formal partial derivative with respect to ``var`` (name or index)."""
    i = _var_index(p, var)
    out = {}
    for e, c in p.terms.items():
        k = e[i]
        if k:
            e2 = list(e)
            e2[i] = k - 1
            out[tuple(e2)] = c * k
    return Poly(p.space, out)


def grad(p: Poly) -> Tuple[Poly, ...]:
    """Gradient with respect to the state variables."""
    return tuple(partial(p, i) for i in range(p.space.n))


def lie(p: Poly, field: Sequence[Poly]) -> Poly:
    """Directional derivative grad(p) . field over the state variables."""
    if len(field) != p.space.n:
        raise PolyError(f"vector field has length {len(field)}, expected {p.space.n}")
    out = p.space.zero()
    for i, fi in enumerate(field):
        if fi.is_zero():
            continue
        d = partial(p, i)
        if not d.is_zero():
            out = out + d * fi
    return out


def lie_mat(p: Poly, g: Sequence[Sequence[Poly]]) -> Tuple[Poly, ...]:
    """Row vector grad(p) . g, one entry per input channel."""
    n = p.space.n
    if len(g) != n:
        raise PolyError(f"input matrix has {len(g)} rows, expected {n}")
    m = len(g[0]) if n else 0
    grads = grad(p)
    row = []
    for k in range(m):
        acc = p.space.zero()
        for i in range(n):
            if len(g[i]) != m:
                raise PolyError("ragged input matrix")
            if not g[i][k].is_zero() and not grads[i].is_zero():
                acc = acc + grads[i] * g[i][k]
        row.append(acc)
    return tuple(row)


def evaluate(p: Poly, point) -> float:
    pt = np.asarray(point, dtype=float).ravel()
    if pt.size != len(p.space):
        raise PolyError(f"point has length {pt.size}, expected {len(p.space)}")
    total = 0.0
    for e, c in p.terms.items():
        term = c
        for x, k in zip(pt, e):
            if k:
                term *= x ** k
        total += term
    return float(total)


def compose_univariate(coeffs: Mapping[int, float], inner: Poly) -> Poly:
    """Expand sum_k coeffs[k] * inner**k."""
    out = inner.space.zero()
    power = inner.space.const(1.0)
    top = max(coeffs, default=0)
    for k in range(top + 1):
        if k > 0:
            power = power * inner
        c = coeffs.get(k, 0.0)
        if c:
            out = out + power * c
    return out


def substitute(p: Poly, replacements: Mapping[str, Poly]) -> Poly:
    """Replace the named variables by polynomials (ordinary composition)."""
    space = p.space
    idx = {space.index(k): v for k, v in replacements.items()}
    powers: Dict[Tuple[int, int], Poly] = {}
    out = space.zero()
    for e, c in p.terms.items():
        base = list(e)
        term = None
        for i, r in idx.items():
            k = e[i]
            base[i] = 0
            if k:
                key = (i, k)
                if key not in powers:
                    powers[key] = r ** k
                term = powers[key] if term is None else term * powers[key]
        mono = Poly(space, {tuple(base): c})
        out = out + (mono if term is None else mono * term)
    return out


def monomial_basis(space: VarSpace, variables: Optional[Sequence] = None, max_degree: int = 0,
                   min_degree: int = 0) -> List[Monomial]:
    """All monomials in ``variables`` with degree in [min_degree, max_degree], graded-lex order."""
    if max_degree < 0:
        raise PolyError("max_degree must be nonnegative")
    if variables is None:
        variables = range(space.n)
    idx = sorted(space.index(v) if isinstance(v, str) else int(v) for v in variables)
    nv = len(space)
    out = []
    for d in range(min_degree, max_degree + 1):
        block = []
        for combo in combinations_with_replacement(idx, d):
            e = [0] * nv
            for i in combo:
                e[i] += 1
            block.append(Monomial(e))
        block.sort(key=grlex_key)
        out.extend(block)
    return out


def basis_size(num_vars: int, degree: int) -> int:
    return math.comb(num_vars + degree, degree)


def _fmt_coef(c: float) -> str:
    return repr(float(c))


def to_string(p: Poly) -> str:
    """Render in the scenario-file grammar (re-parseable)."""
    if not p.terms:
        return "0"
    parts = []
    for e in sorted(p.terms, key=lambda e: (-sum(e), tuple(-k for k in e))):
        c = p.terms[e]
        factors = []
        for name, k in zip(p.space.names, e):
            if k == 1:
                factors.append(name)
            elif k > 1:
                factors.append(f"{name}^{k}")
        mag = abs(c)
        sign = "-" if c < 0 else "+"
        if factors and mag == 1.0:
            body = "*".join(factors)
        elif factors:
            body = _fmt_coef(mag) + "*" + "*".join(factors)
        else:
            body = _fmt_coef(mag)
        parts.append((sign, body))
    s0, b0 = parts[0]
    if s0 == "-" and not b0[0].isdigit():
        # unary minus binds tighter than '^' in the grammar, so keep a coefficient
        b0 = "1.0*" + b0
    text = ("-" if s0 == "-" else "") + b0
    for s, b in parts[1:]:
        text += f" {s} {b}"
    return text


def poly_from_terms(space: VarSpace, terms: Mapping[str, float]) -> Poly:
    """Build from a map of monomial strings like ``"x^2*y"`` to coefficients."""
    out = {}
    for mono, c in terms.items():
        e = [0] * len(space)
        mono = mono.strip()
        if mono not in ("", "1"):
            for f in mono.split("*"):
                name, _, k = f.partition("^")
                e[space.index(name.strip())] += int(k) if k else 1
        out[tuple(e)] = out.get(tuple(e), 0.0) + float(c)
    return Poly(space, out)


class AffinePoly:
    """Polynomial whose coefficients are affine in scalar decision variables.

    Represents ``const + sum_k v_k * parts[k]`` where each ``v_k`` is a
    decision-variable id from a single registry and ``parts[k]`` is a Poly.
    """

    __slots__ = ("space", "const", "parts")

    def __init__(self, space: VarSpace, const: Optional[Poly] = None, parts: Optional[Mapping[int, Poly]] = None):
        self.space = space
        self.const = const if const is not None else space.zero()
        self.parts = {k: v for k, v in (parts or {}).items() if not v.is_zero()}

    @classmethod
    def lift(cls, p: Poly) -> "AffinePoly":
        return cls(p.space, p, {})

    @classmethod
    def variable(cls, space: VarSpace, var_id: int, shape: Optional[Poly] = None) -> "AffinePoly":
        return cls(space, None, {var_id: shape if shape is not None else space.const(1.0)})

    def _lift(self, other) -> "AffinePoly":
        if isinstance(other, AffinePoly):
            return other
        if isinstance(other, Poly):
            return AffinePoly.lift(other)
        if isinstance(other, (int, float, np.floating, np.integer)):
            return AffinePoly.lift(self.space.const(float(other)))
        return NotImplemented

    def __add__(self, other):
        other = self._lift(other)
        if other is NotImplemented:
            return other
        parts = dict(self.parts)
        for k, v in other.parts.items():
            parts[k] = parts[k] + v if k in parts else v
        return AffinePoly(self.space, self.const + other.const, parts)

    __radd__ = __add__

    def __neg__(self):
        return AffinePoly(self.space, -self.const, {k: -v for k, v in self.parts.items()})

    def __sub__(self, other):
        other = self._lift(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, AffinePoly):
            if other.parts and self.parts:
                raise PolyError("product of two decision-dependent polynomials is not affine")
            if not other.parts:
                other = other.const
            else:
                return other * self.const
        if isinstance(other, (int, float, np.floating, np.integer)):
            other = float(other)
            return AffinePoly(self.space, self.const * other, {k: v * other for k, v in self.parts.items()})
        if isinstance(other, Poly):
            return AffinePoly(self.space, self.const * other, {k: v * other for k, v in self.parts.items()})
        return NotImplemented

    __rmul__ = __mul__

    @property
    def degree(self) -> int:
        return max([self.const.degree] + [v.degree for v in self.parts.values()])

    def monomials(self) -> List[Exponent]:
        mons = set(self.const.terms)
        for v in self.parts.values():
            mons.update(v.terms)
        return sorted(mons, key=grlex_key)

    def variables(self) -> List[int]:
        return sorted(self.parts)

    def collapse(self, values: Mapping[int, float]) -> Poly:
        """Substitute numeric values for every decision variable."""
        out = self.const
        for k, v in self.parts.items():
            out = out + v * float(values[k])
        return out

    def __repr__(self) -> str:
        return f"AffinePoly(const={self.const}, vars={sorted(self.parts)})"


def affine_change(p: Poly, center: Mapping[int, float], radius: Mapping[int, float]) -> Poly:
    """Substitute x_i -> center[i] + radius[i] * x_i for the listed variable indices."""
    expansions: Dict[Tuple[int, int], List[Tuple[int, float]]] = {}

    def expand(i: int, k: int):
        key = (i, k)
        if key not in expansions:
            c, s = center.get(i, 0.0), radius.get(i, 1.0)
            expansions[key] = [(j, math.comb(k, j) * s ** j * c ** (k - j)) for j in range(k + 1)
                               if math.comb(k, j) * s ** j * c ** (k - j) != 0.0]
        return expansions[key]

    out: Dict[Exponent, float] = {}
    idx = [i for i in center.keys() | radius.keys()]
    for e, c in p.terms.items():
        partial_terms = [(list(e), c)]
        for i in idx:
            k = e[i]
            if k == 0:
                continue
            nxt = []
            for base, coef in partial_terms:
                for j, w in expand(i, k):
                    b2 = list(base)
                    b2[i] = j
                    nxt.append((b2, coef * w))
            partial_terms = nxt
        for base, coef in partial_terms:
            t = tuple(base)
            out[t] = out.get(t, 0.0) + coef
    scale = max((abs(v) for v in out.values()), default=0.0)
    return Poly(p.space, out, tol=DROP_TOL * scale)
