"""Scenario files: a small TOML schema describing system, sets, candidates,
CLIFs and options, plus the built-in scenarios.

Schema (version 1)::

    version = 1
    name = "..."
    seed = 0

    [system]
    states = ["x1", "x2"]
    inputs = ["u"]
    f = ["x2", "0"]                 # one expression per state
    g = [["0"], ["1"]]              # n rows of m expressions

    [state_box]                     # X = box (+ optional extra generators h >= 0)
    lo = [-2, -2]
    hi = [2, 2]
    extra = []

    [input_box]                     # U = box (+ extra generators affine in the inputs)
    lo = [-1]
    hi = [1]
    extra = []

    [[candidates]]
    name = "b"
    b = "x1"
    r = 2
    half_degrees = [0.5, 0.5]       # template size per slot, optional
    slots = [0.5, 0.5]              # fixed linear gains, only used by `verify`

    [[clifs]]
    name = "V"
    V = "(x1 + x2 - 1)^2"

    [goal]                          # state name -> target, used by the runtime
    x1 = 1.0

    [synthesis]                     # any SynthesisOptions field
    [runtime]                       # any RuntimeOptions field, plus speed / nominal
    [initial_conditions]            # grid = {var = count}, uniform = {var = [lo, hi]},
                                    # ranges = {var = [lo, hi]} (default: the state box), inset
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import tomli
import tomli_w

from .parser import ParseError, parse_poly
from .poly import PolyError, VarSpace
from .runtime import RuntimeOptions
from .synthesizer import SynthesisOptions
from .system import (ClassKSlot, ClassKTemplate, Clif, ControlAffineSystem, HocbfCandidate, ModelError,
                     SemialgebraicSet)

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario; the message names the offending entry."""


@dataclass
class Scenario:
    """A validated scenario together with the raw table it came from."""

    name: str
    raw: Dict[str, Any]
    space: VarSpace
    system: ControlAffineSystem
    X: SemialgebraicSet
    U: SemialgebraicSet
    candidates: List[HocbfCandidate]
    clifs: List[Clif]
    goal: Dict[str, float] = field(default_factory=dict)
    seed: int = 0
    fixed_slots: Dict[str, List[float]] = field(default_factory=dict)

    def synthesis_options(self, **override) -> SynthesisOptions:
        opts = dict(self.raw.get("synthesis", {}))
        opts.update(override)
        opts.setdefault("seed", self.seed)
        return SynthesisOptions(**opts)

    def runtime_options(self, **override) -> RuntimeOptions:
        opts = {k: v for k, v in self.raw.get("runtime", {}).items() if k not in ("speed", "nominal")}
        opts.update({k: v for k, v in override.items() if v is not None})
        return RuntimeOptions(**opts)

    @property
    def speed(self) -> Optional[str]:
        return self.raw.get("runtime", {}).get("speed")

    def nominal(self):
        texts = self.raw.get("runtime", {}).get("nominal")
        if texts is None:
            return None
        return [self.poly(t, "runtime.nominal") for t in texts]

    def poly(self, text: str, where: str):
        try:
            return parse_poly(str(text), self.space)
        except (ParseError, PolyError) as exc:
            raise ScenarioError(f"{self.name}: {where}: {exc}") from None

    def verification_candidates(self) -> List[HocbfCandidate]:
        """Candidates with the fixed linear gains from ``slots`` entries."""
        out = []
        for c in self.candidates:
            gains = self.fixed_slots.get(c.name)
            if gains is None:
                raise ScenarioError(f"{self.name}: candidate {c.name} has no fixed slots to verify")
            out.append(c.with_slots([ClassKSlot(ClassKTemplate.linear(a)) for a in gains]))
        return out

    def initial_conditions(self, seed: Optional[int] = None) -> np.ndarray:
        """Grid over some states and uniform draws for the rest, in scenario order."""
        ic_table = self.raw.get("initial_conditions", {})
        grid = ic_table.get("grid", {})
        uniform = ic_table.get("uniform", {})
        inset = float(ic_table.get("inset", 0.0))
        names = self.space.states
        box = {v: (lo, hi) for v, lo, hi in zip(self.X.variables, self.X.lo, self.X.hi)}
        box.update({v: tuple(r) for v, r in ic_table.get("ranges", {}).items()})
        axes = []
        for v, count in grid.items():
            if v not in box:
                raise ScenarioError(f"{self.name}: initial_conditions.grid: {v} is not a boxed state")
            lo, hi = box[v]
            axes.append(np.linspace(lo + inset, hi - inset, int(count)))
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes)) if axes else np.zeros((1, 0))
        rng = np.random.default_rng(self.seed if seed is None else seed)
        out = np.zeros((mesh.shape[0], len(names)))
        for k, v in enumerate(grid):
            out[:, names.index(v)] = mesh[:, k]
        for v, (lo, hi) in uniform.items():
            out[:, names.index(v)] = rng.uniform(lo, hi, size=mesh.shape[0])
        return out


def _require(table: Dict[str, Any], key: str, where: str):
    if key not in table:
        raise ScenarioError(f"{where}: missing key {key!r}")
    return table[key]


def from_dict(raw: Dict[str, Any], source: str = "<scenario>") -> Scenario:
    """Validate a parsed table and build the model objects."""
    raw = copy.deepcopy(raw)
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"{source}: unsupported scenario version {version}")
    name = str(raw.get("name", Path(source).stem))
    sysd = _require(raw, "system", source)
    states = list(_require(sysd, "states", f"{source}: system"))
    inputs = list(_require(sysd, "inputs", f"{source}: system"))
    try:
        space = VarSpace(states, inputs)
    except PolyError as exc:
        raise ScenarioError(f"{source}: system: {exc}") from None
    sc = Scenario(name, raw, space, None, None, None, [], [], seed=int(raw.get("seed", 0)))

    f_txt = _require(sysd, "f", f"{source}: system")
    g_txt = _require(sysd, "g", f"{source}: system")
    if len(f_txt) != len(states) or len(g_txt) != len(states) or any(len(row) != len(inputs) for row in g_txt):
        raise ScenarioError(f"{source}: system: f needs {len(states)} entries and g {len(states)}x{len(inputs)}")
    f = [sc.poly(t, f"system.f[{k}]") for k, t in enumerate(f_txt)]
    g = [[sc.poly(t, f"system.g[{k}][{j}]") for j, t in enumerate(row)] for k, row in enumerate(g_txt)]
    try:
        sc.system = ControlAffineSystem(space, f, g)
    except (ModelError, PolyError) as exc:
        raise ScenarioError(f"{source}: system: {exc}") from None

    sc.X = _box(sc, raw, "state_box", states, "quadratic", source)
    sc.U = _box(sc, raw, "input_box", inputs, "linear", source)

    seen = set()
    for k, cd in enumerate(raw.get("candidates", [])):
        where = f"candidates[{k}]"
        cname = str(cd.get("name", f"h{k + 1}"))
        if cname in seen:
            raise ScenarioError(f"{source}: {where}: duplicate candidate name {cname!r}")
        seen.add(cname)
        b = sc.poly(_require(cd, "b", f"{source}: {where}"), f"{where}.b")
        r = int(_require(cd, "r", f"{source}: {where}"))
        try:
            cand = HocbfCandidate(cname, b, r, half_degrees=[float(m) for m in cd.get("half_degrees", [])])
        except ModelError as exc:
            raise ScenarioError(f"{source}: {where}: {exc}") from None
        sc.candidates.append(cand)
        if "slots" in cd:
            gains = [float(a) for a in cd["slots"]]
            if len(gains) != r or any(a < 0 for a in gains):
                raise ScenarioError(f"{source}: {where}: slots needs {r} nonnegative gains")
            sc.fixed_slots[cname] = gains
    if not sc.candidates:
        raise ScenarioError(f"{source}: at least one candidate is required")
    for k, cd in enumerate(raw.get("clifs", [])):
        where = f"clifs[{k}]"
        sc.clifs.append(Clif(str(cd.get("name", f"V{k + 1}")), sc.poly(_require(cd, "V", f"{source}: {where}"),
                                                                       f"{where}.V")))
    for v, val in raw.get("goal", {}).items():
        if v not in states:
            raise ScenarioError(f"{source}: goal: unknown state {v!r}")
        sc.goal[v] = float(val)
    try:
        sc.synthesis_options()
        sc.runtime_options()
    except (TypeError, ModelError) as exc:
        raise ScenarioError(f"{source}: options: {exc}") from None
    speed = sc.speed
    if speed is not None and speed not in states:
        raise ScenarioError(f"{source}: runtime.speed: unknown state {speed!r}")
    sc.nominal()
    return sc


def _box(sc: Scenario, raw, key, names, form, source) -> SemialgebraicSet:
    table = raw.get(key)
    if table is None:
        raise ScenarioError(f"{source}: missing table [{key}]")
    lo = _require(table, "lo", f"{source}: {key}")
    hi = _require(table, "hi", f"{source}: {key}")
    variables = list(table.get("variables", names))
    if len(lo) != len(variables) or len(hi) != len(variables):
        raise ScenarioError(f"{source}: {key}: lo/hi need {len(variables)} entries")
    try:
        box = SemialgebraicSet.box(sc.space, variables, [float(v) for v in lo], [float(v) for v in hi], form=form)
    except (ModelError, PolyError) as exc:
        raise ScenarioError(f"{source}: {key}: {exc}") from None
    extra = [sc.poly(t, f"{key}.extra[{k}]") for k, t in enumerate(table.get("extra", []))]
    return box.with_generators(extra) if extra else box


def loads(text: str, source: str = "<string>") -> Scenario:
    if not text.strip():
        raise ScenarioError(f"{source}: empty scenario")
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    return from_dict(raw, source)


def load(path_or_name: str) -> Scenario:
    """Load a scenario file, or a built-in scenario by name."""
    if path_or_name in BUILTINS and not Path(path_or_name).exists():
        return from_dict(BUILTINS[path_or_name](), path_or_name)
    path = Path(path_or_name)
    if not path.is_file():
        raise ScenarioError(f"{path_or_name}: no such file or built-in scenario "
                            f"(built-ins: {', '.join(sorted(BUILTINS))})")
    return loads(path.read_text(), str(path))


def dumps(sc: Scenario) -> str:
    return tomli_w.dumps(sc.raw)


def save(sc: Scenario, path) -> None:
    Path(path).write_text(dumps(sc))


# -- built-in scenarios ---------------------------------------------------------

_COS = "(1 - 0.5*th^2)"
_SIN = "(th - 0.16666666666666666*th^3)"


def unicycle7() -> Dict[str, Any]:
    """Planar unicycle with speed state, three round obstacles and four walls."""
    half_pi = math.pi / 2
    circles = [("c1", 35, 25, 7), ("c2", 41, 10, 3), ("c3", 10, 40, 4)]
    cands = [{"name": n, "b": f"(x - {cx})^2 + (y - {cy})^2 - {R * R}", "r": 2} for n, cx, cy, R in circles]
    cands += [{"name": "w1", "b": "x", "r": 2}, {"name": "w2", "b": "50 - x", "r": 2},
              {"name": "w3", "b": "y", "r": 2}, {"name": "w4", "b": "50 - y", "r": 2}]
    return {
        "version": SCHEMA_VERSION,
        "name": "unicycle7",
        "seed": 0,
        "system": {
            "states": ["x", "y", "v", "th"],
            "inputs": ["u1", "u2"],
            "f": [f"v*{_COS}", f"v*{_SIN}", "0", "0"],
            "g": [["0", "0"], ["0", "0"], ["0", "1"], ["1", "0"]],
        },
        "state_box": {"lo": [0.0, 0.0, 0.0, -half_pi], "hi": [50.0, 50.0, 2.0, half_pi]},
        "input_box": {"lo": [-1.0, -2.0], "hi": [1.0, 2.0]},
        "candidates": cands,
        "clifs": [
            {"name": "Vx", "V": f"2*v*(x - 46)*{_COS} + (x - 46)^2"},
            {"name": "Vy", "V": f"2*v*(y - 34)*{_SIN} + (y - 34)^2"},
            {"name": "Vv", "V": "(v - 0.2)^2"},
        ],
        "goal": {"x": 46.0, "y": 34.0},
        "synthesis": {"deg_u": 2, "stage_a_input": "decision"},
        "runtime": {"dt": 0.05, "horizon": 60.0, "speed": "v"},
        "initial_conditions": {"grid": {"x": 5, "y": 5}, "uniform": {"v": [0.0, 2.0], "th": [-half_pi, half_pi]},
                               "inset": 3.0},
    }


def double_integrator() -> Dict[str, Any]:
    """Position/velocity with a wall at x1 = 0 and a CLIF towards x1 = 1."""
    return {
        "version": SCHEMA_VERSION,
        "name": "double_integrator",
        "seed": 0,
        "system": {"states": ["x1", "x2"], "inputs": ["u"], "f": ["x2", "0"], "g": [["0"], ["1"]]},
        "state_box": {"lo": [-2.0, -2.0], "hi": [2.0, 2.0]},
        "input_box": {"lo": [-1.0], "hi": [1.0]},
        "candidates": [{"name": "wall", "b": "x1", "r": 2, "slots": [0.5, 0.5]}],
        "clifs": [{"name": "V", "V": "(x1 + x2 - 1)^2"}],
        "goal": {"x1": 1.0},
        "synthesis": {"deg_u": 2},
        "runtime": {"dt": 0.05, "horizon": 20.0, "goal_tol": 0.05, "speed": "x2", "nominal": ["1 - x1 - 2*x2"]},
        "initial_conditions": {"grid": {"x1": 4}, "ranges": {"x1": [0.2, 1.4]}, "uniform": {"x2": [0.0, 0.3]}},
    }


BUILTINS = {"unicycle7": unicycle7, "double_integrator": double_integrator}
