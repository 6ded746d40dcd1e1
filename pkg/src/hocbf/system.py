"""Control-affine systems, semialgebraic sets, class-K objects and HOCBF chains."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .poly import Poly, PolyError, VarSpace, compose_univariate, lie, lie_mat

SQRT_EPS = 1e-9
RELDEG_TOL = 1e-12
ZETA_FACTOR = 1.01
ZETA_POINTS = 101
ZETA_MAX_GRID = 2_000_000


class ModelError(ValueError):
    pass


def pad_states(space: VarSpace, X) -> np.ndarray:
    """Append zero input columns so state-only points can feed ``Poly.eval_many``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] == len(space):
        return X
    if X.shape[1] != space.n:
        raise ModelError(f"points have {X.shape[1]} columns, expected {space.n}")
    return np.hstack([X, np.zeros((X.shape[0], space.m))])


def eval_states(p: Poly, X) -> np.ndarray:
    return p.eval_many(pad_states(p.space, X))


class ControlAffineSystem:
    """Dynamics xdot = f(x) + g(x) u with polynomial f (n) and g (n x m)."""

    def __init__(self, space: VarSpace, f: Sequence[Poly], g: Sequence[Sequence[Poly]]):
        n, m = space.n, space.m
        if len(f) != n or len(g) != n or any(len(row) != m for row in g):
            raise ModelError(f"f must have {n} entries and g must be {n}x{m}")
        inputs = set(range(n, n + m))
        for p in list(f) + [q for row in g for q in row]:
            if p.space != space:
                raise ModelError("dynamics use a different variable space")
            if inputs.intersection(p.uses()):
                raise ModelError("f and g may not depend on input symbols")
        self.space = space
        self.f = tuple(f)
        self.g = tuple(tuple(row) for row in g)

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def m(self) -> int:
        return self.space.m

    def f_eval(self, x) -> np.ndarray:
        pt = pad_states(self.space, x)
        return np.array([p.eval_many(pt) for p in self.f]).T

    def g_eval(self, x) -> np.ndarray:
        pt = pad_states(self.space, x)
        vals = np.array([[p.eval_many(pt) for p in row] for row in self.g])  # n, m, N
        return np.transpose(vals, (2, 0, 1))

    def rhs(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        f = self.f_eval(x[None, :])[0]
        g = self.g_eval(x[None, :])[0]
        return f + g @ np.asarray(u, dtype=float)

    def lie_f(self, p: Poly) -> Poly:
        return lie(p, self.f)

    def lie_g(self, p: Poly) -> Tuple[Poly, ...]:
        return lie_mat(p, self.g)


class SemialgebraicSet:
    """{z : g_k(z) >= 0} with a bounding box over the listed variables.

    ``variables`` are the names the box refers to (states for X, inputs for U).
    """

    def __init__(self, space: VarSpace, generators: Sequence[Poly], variables: Sequence[str],
                 lo: Sequence[float], hi: Sequence[float]):
        self.space = space
        self.generators = tuple(generators)
        self.variables = tuple(variables)
        self.idx = [space.index(v) for v in self.variables]
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != (len(self.idx),) or self.hi.shape != self.lo.shape:
            raise ModelError("box bounds must match the variable list")
        if np.any(self.hi < self.lo):
            raise ModelError("box has hi < lo")
        for p in self.generators:
            if p.space != space:
                raise ModelError("generator uses a different variable space")

    @classmethod
    def box(cls, space: VarSpace, variables: Sequence[str], lo, hi, form: str = "quadratic"):
        """Box set with generators (z-lo)(hi-z) >= 0 (``quadratic``) or two linear ones per side."""
        gens = []
        for v, a, b in zip(variables, lo, hi):
            z = space.var(v)
            if form == "quadratic":
                gens.append((z - float(a)) * (float(b) - z))
            elif form == "linear":
                gens.extend([z - float(a), float(b) - z])
            else:
                raise ModelError(f"unknown box form {form!r}")
        return cls(space, gens, variables, lo, hi)

    def with_generators(self, extra: Sequence[Poly]) -> "SemialgebraicSet":
        return SemialgebraicSet(self.space, list(self.generators) + list(extra), self.variables, self.lo, self.hi)

    def _full(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        pts = np.zeros((Z.shape[0], len(self.space)))
        pts[:, self.idx] = Z
        return pts

    def contains(self, Z, tol: float = 0.0) -> np.ndarray:
        """Membership of box-coordinate points (columns ordered like ``variables``)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        ok = np.all((Z >= self.lo - tol) & (Z <= self.hi + tol), axis=1)
        pts = self._full(Z)
        for g in self.generators:
            ok &= g.eval_many(pts) >= -tol
        return ok

    def sample(self, count: int, rng: np.random.Generator, max_draws: Optional[int] = None) -> np.ndarray:
        """Rejection-sample up to ``count`` points of the set inside its box."""
        max_draws = max_draws or 50 * count
        out = []
        drawn = 0
        while sum(len(o) for o in out) < count and drawn < max_draws:
            batch = min(max(count, 1000), max_draws - drawn)
            Z = rng.uniform(self.lo, self.hi, size=(batch, len(self.idx)))
            drawn += batch
            out.append(Z[self.contains(Z)])
        pts = np.vstack(out) if out else np.zeros((0, len(self.idx)))
        return pts[:count]


# -- class-K objects ---------------------------------------------------------------


@dataclass(frozen=True)
class ClassKTemplate:
    """alpha(z) = sum_k c_k z^k / k for k = 1..2m, all c_k >= 0."""

    coeffs: Tuple[float, ...]

    def __post_init__(self):
        if len(self.coeffs) < 1:
            raise ModelError("template needs at least one coefficient")
        if any(c < 0 for c in self.coeffs):
            raise ModelError("class-K template coefficients must be nonnegative")

    @property
    def n_terms(self) -> int:
        return len(self.coeffs)

    @property
    def half_degree(self) -> float:
        return self.n_terms / 2

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return sum(c * z ** k / k for k, c in enumerate(self.coeffs, start=1))

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        return sum(c * z ** (k - 1) for k, c in enumerate(self.coeffs, start=1))

    def compose(self, inner: Poly) -> Poly:
        return compose_univariate({k: c / k for k, c in enumerate(self.coeffs, start=1)}, inner)

    def compose_derivative(self, inner: Poly) -> Poly:
        return compose_univariate({k - 1: c for k, c in enumerate(self.coeffs, start=1)}, inner)

    @classmethod
    def linear(cls, a: float) -> "ClassKTemplate":
        return cls((float(a),))


@dataclass(frozen=True)
class SqrtClassK:
    """alpha(z) = a * sqrt(z)."""

    a: float

    def __post_init__(self):
        if not self.a >= 0:
            raise ModelError("sqrt class-K gain must be nonnegative")

    def __call__(self, z):
        return self.a * np.sqrt(np.maximum(np.asarray(z, dtype=float), 0.0))

    def derivative(self, z, eps: float = SQRT_EPS):
        return self.a / (2.0 * np.maximum(np.sqrt(np.maximum(np.asarray(z, dtype=float), 0.0)), eps))


def sqrt_from_beta(b1: float) -> SqrtClassK:
    if b1 < 0:
        raise ModelError("b1 must be nonnegative")
    return SqrtClassK(math.sqrt(2.0 * b1))


@dataclass
class ClassKSlot:
    """One class-K slot of a chain: a polynomial form and an optional sqrt form.

    ``mode`` selects which form the runtime uses; symbolic chains always use
    the polynomial form.
    """

    poly: ClassKTemplate
    sqrt: Optional[SqrtClassK] = None
    mode: str = "poly"

    def __post_init__(self):
        if self.mode not in ("poly", "sqrt"):
            raise ModelError(f"unknown runtime mode {self.mode!r}")
        if self.mode == "sqrt" and self.sqrt is None:
            raise ModelError("sqrt mode requires a sqrt form")


@dataclass
class HocbfCandidate:
    name: str
    b: Poly
    r: int
    slots: List[Optional[ClassKSlot]] = field(default_factory=list)
    half_degrees: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.r < 1:
            raise ModelError("relative degree must be >= 1")
        if not self.slots:
            self.slots = [None] * self.r
        if len(self.slots) != self.r:
            raise ModelError("slot count must equal the relative degree")
        if not self.half_degrees:
            self.half_degrees = [0.5] * self.r
        for m in self.half_degrees:
            if abs(2 * m - round(2 * m)) > 1e-12 or m <= 0:
                raise ModelError("half degree must be a positive multiple of 1/2")

    def with_slots(self, slots) -> "HocbfCandidate":
        return HocbfCandidate(self.name, self.b, self.r, list(slots), list(self.half_degrees))


@dataclass
class Clif:
    name: str
    V: Poly


def check_relative_degree(b: Poly, sys: ControlAffineSystem, r: int):
    """Return (ok, witness): L_g L_f^k b vanishes for k < r-1 and not for k = r-1."""
    if r < 1:
        raise ModelError("r must be >= 1")
    p = b
    for k in range(r):
        row = sys.lie_g(p)
        big = max((q.max_abs_coeff() for q in row), default=0.0)
        if k < r - 1 and big > RELDEG_TOL:
            return False, (k, row)
        if k == r - 1:
            if big <= RELDEG_TOL:
                return False, (k, row)
            first = next(q for q in row if q.max_abs_coeff() > RELDEG_TOL)
            return True, first
        p = sys.lie_f(p)
    return False, None


def infer_relative_degree(b: Poly, sys: ControlAffineSystem, max_r: int = 8) -> int:
    p = b
    for k in range(max_r):
        if any(q.max_abs_coeff() > RELDEG_TOL for q in sys.lie_g(p)):
            return k + 1
        p = sys.lie_f(p)
    raise ModelError(f"input does not appear within {max_r} derivatives")


@dataclass
class HocbfChain:
    candidate: HocbfCandidate
    psis: List[Poly]
    lf_last: Poly  # L_f psi_{r-1}
    input_row: Tuple[Poly, ...]  # L_g psi_{r-1}
    alpha_r_term: Optional[Poly]  # alpha_r(psi_{r-1}) if slot r known

    @property
    def drift_term(self) -> Poly:
        return self.lf_last if self.alpha_r_term is None else self.lf_last + self.alpha_r_term


def build_chain(candidate: HocbfCandidate, sys: ControlAffineSystem, depth: Optional[int] = None) -> HocbfChain:
    """Construct psi_0..psi_{depth-1} using the polynomial forms of slots 1..depth-1.

    ``depth`` defaults to r. Slot ``depth`` (if any) supplies alpha_r.
    """
    depth = candidate.r if depth is None else depth
    psis = [candidate.b]
    for i in range(1, depth):
        slot = candidate.slots[i - 1]
        if slot is None:
            raise ModelError(f"{candidate.name}: slot {i} must be known to build psi_{i}")
        prev = psis[-1]
        psis.append(sys.lie_f(prev) + slot.poly.compose(prev))
    last = psis[-1]
    slot_r = candidate.slots[depth - 1] if depth - 1 < len(candidate.slots) else None
    alpha_term = slot_r.poly.compose(last) if slot_r is not None else None
    return HocbfChain(candidate, psis, sys.lie_f(last), sys.lie_g(last), alpha_term)


def zeta_bar(psi: Poly, region: SemialgebraicSet, points: int = ZETA_POINTS, factor: float = ZETA_FACTOR) -> float:
    """Grid maximum of ``psi`` over the feasible part of the box, times ``factor``.

    The grid covers only the box variables that ``psi`` uses; generators that
    involve other variables are dropped, which can only enlarge the set.
    """
    used = set(psi.uses())
    active = [k for k, vi in enumerate(region.idx) if vi in used]
    if used - set(region.idx):
        raise ModelError("psi uses variables outside the region's box")
    per = points
    if active and per ** len(active) > ZETA_MAX_GRID:
        per = max(2, int(ZETA_MAX_GRID ** (1.0 / len(active))))
    axes = [np.linspace(region.lo[k], region.hi[k], per) for k in active]
    if axes:
        grid = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(active), -1).T
    else:
        grid = np.zeros((1, 0))
    pts = np.zeros((grid.shape[0], len(region.space)))
    pts[:, [region.idx[k] for k in active]] = grid
    keep = np.ones(grid.shape[0], dtype=bool)
    active_vars = {region.idx[k] for k in active}
    for g in region.generators:
        if set(g.uses()) <= active_vars:
            keep &= g.eval_many(pts) >= 0
    if not keep.any():
        raise ModelError("no feasible grid point: region appears empty")
    return float(np.max(psi.eval_many(pts[keep]))) * factor


def eta_under_approx(beta: ClassKTemplate, zbar: float, sqrt2: bool = False, grid: int = 1000) -> float:
    """Slope of a linear under-approximation of sqrt(2 beta) on [0, zbar]."""
    if not zbar > 0:
        raise ModelError("zeta_bar must be positive")
    if not beta.coeffs[0] > 0:
        raise ModelError("beta has no linear term, so no positive linear under-approximation exists near 0")
    scale = 2.0 if sqrt2 else 1.0
    eta = math.sqrt(scale * float(beta(zbar))) / zbar
    z = np.linspace(0.0, zbar, grid)
    # the chord is only below sqrt(2 beta) when that function is concave
    eta = min(eta, float(np.min(np.sqrt(2.0 * beta(z[1:])) / z[1:])))
    if np.any(eta * z > np.sqrt(2.0 * beta(z)) * (1 + 1e-12) + 1e-300):
        raise ModelError("linear under-approximation violates sqrt(2 beta) on the grid")
    return eta


class RuntimeChain:
    """Numeric evaluation of a chain whose last symbolic slot may use the sqrt form."""

    def __init__(self, candidate: HocbfCandidate, sys: ControlAffineSystem, eps: float = SQRT_EPS):
        r = candidate.r
        self.candidate = candidate
        self.sys = sys
        self.eps = eps
        if candidate.slots[r - 1] is None:
            raise ModelError(f"{candidate.name}: slot {r} is unknown")
        for i in range(r - 2):
            s = candidate.slots[i]
            if s is None or s.mode != "poly":
                raise ModelError("only slot r-1 may use the sqrt runtime form")
        if r == 1:
            self.psis = [candidate.b]
            self.lf = sys.lie_f(candidate.b)
            self.lg = sys.lie_g(candidate.b)
            self.slot = None
        else:
            base = build_chain(candidate, sys, depth=r - 1)
            phi = base.psis[-1]
            self.psis = base.psis
            self.lf_phi = base.lf_last
            self.lff_phi = sys.lie_f(self.lf_phi)
            self.lglf_phi = sys.lie_g(self.lf_phi)
            self.slot = candidate.slots[r - 2]
            self.phi = phi
        self.alpha_r = candidate.slots[r - 1]

    def evaluate(self, x):
        """Return (psi values list, drift value, input row) at state ``x``."""
        pt = pad_states(self.sys.space, np.asarray(x, dtype=float)[None, :])
        vals = [float(p.eval_many(pt)[0]) for p in self.psis]
        if self.slot is None:
            last = vals[0]
            drift = float(self.lf.eval_many(pt)[0])
            row = np.array([float(q.eval_many(pt)[0]) for q in self.lg])
        else:
            phi = vals[-1]
            lf = float(self.lf_phi.eval_many(pt)[0])
            if self.slot.mode == "sqrt":
                a, da = float(self.slot.sqrt(phi)), float(self.slot.sqrt.derivative(phi, self.eps))
            else:
                a, da = float(self.slot.poly(phi)), float(self.slot.poly.derivative(phi))
            last = lf + a
            vals.append(last)
            drift = float(self.lff_phi.eval_many(pt)[0]) + da * lf
            row = np.array([float(q.eval_many(pt)[0]) for q in self.lglf_phi])
        alpha = self.alpha_r.poly if self.alpha_r.mode == "poly" else self.alpha_r.sqrt
        drift_total = drift + float(alpha(last))
        return vals, drift_total, row

    def margins(self, X) -> np.ndarray:
        """psi_0..psi_{r-1} at many states, shape (N, r)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        pts = pad_states(self.sys.space, X)
        cols = [p.eval_many(pts) for p in self.psis]
        if self.slot is not None:
            phi = cols[-1]
            lf = self.lf_phi.eval_many(pts)
            a = self.slot.sqrt(phi) if self.slot.mode == "sqrt" else self.slot.poly(phi)
            cols.append(lf + a)
        return np.array(cols).T


def box_corners(lo, hi) -> np.ndarray:
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


class StateScaling:
    """Affine change of state coordinates x = center + radius * w.

    Lie derivatives, class-K compositions and quadratic-module membership all
    commute with this change, so problems can be posed in well-scaled ``w``.
    """

    def __init__(self, space: VarSpace, center: Sequence[float], radius: Sequence[float]):
        self.space = space
        self.center = np.asarray(center, dtype=float)
        self.radius = np.asarray(radius, dtype=float)
        if self.center.shape != (space.n,) or self.radius.shape != (space.n,) or np.any(self.radius <= 0):
            raise ModelError("scaling needs one positive radius per state")

    @classmethod
    def identity(cls, space: VarSpace) -> "StateScaling":
        return cls(space, np.zeros(space.n), np.ones(space.n))

    @classmethod
    def from_box(cls, space: VarSpace, region: "SemialgebraicSet") -> "StateScaling":
        c = np.zeros(space.n)
        s = np.ones(space.n)
        for k, vi in enumerate(region.idx):
            if vi < space.n:
                c[vi] = 0.5 * (region.lo[k] + region.hi[k])
                s[vi] = max(0.5 * (region.hi[k] - region.lo[k]), 1e-12)
        return cls(space, c, s)

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.center == 0) and np.all(self.radius == 1))

    def poly_to_w(self, p: Poly) -> Poly:
        if self.is_identity:
            return p
        from .poly import affine_change
        return affine_change(p, dict(enumerate(self.center)), dict(enumerate(self.radius)))

    def poly_to_x(self, p: Poly) -> Poly:
        if self.is_identity:
            return p
        from .poly import affine_change
        return affine_change(p, dict(enumerate(-self.center / self.radius)), dict(enumerate(1.0 / self.radius)))

    def points_to_w(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.center) / self.radius

    def points_to_x(self, W) -> np.ndarray:
        return self.center + self.radius * np.asarray(W, dtype=float)

    def system_to_w(self, sys: ControlAffineSystem) -> ControlAffineSystem:
        f = [self.poly_to_w(p) / float(s) for p, s in zip(sys.f, self.radius)]
        g = [[self.poly_to_w(p) / float(s) for p in row] for row, s in zip(sys.g, self.radius)]
        return ControlAffineSystem(sys.space, f, g)

    def set_to_w(self, region: SemialgebraicSet) -> SemialgebraicSet:
        gens = [self.poly_to_w(p) for p in region.generators]
        lo, hi = region.lo.copy(), region.hi.copy()
        for k, vi in enumerate(region.idx):
            if vi < self.space.n:
                lo[k] = (lo[k] - self.center[vi]) / self.radius[vi]
                hi[k] = (hi[k] - self.center[vi]) / self.radius[vi]
        return SemialgebraicSet(region.space, gens, region.variables, lo, hi)

    def candidate_to_w(self, cand: HocbfCandidate) -> HocbfCandidate:
        return HocbfCandidate(cand.name, self.poly_to_w(cand.b), cand.r, list(cand.slots), list(cand.half_degrees))

    def clif_to_w(self, clif: Clif) -> Clif:
        return Clif(clif.name, self.poly_to_w(clif.V))
