import math

import numpy as np
import pytest

from hocbf import scenario
from hocbf.scenario import ScenarioError


def test_unicycle_contents():
    sc = scenario.load("unicycle7")
    assert [c.name for c in sc.candidates] == ["c1", "c2", "c3", "w1", "w2", "w3", "w4"]
    assert all(c.r == 2 for c in sc.candidates)
    assert sum(c.r for c in sc.candidates) == 14
    assert [c.name for c in sc.clifs] == ["Vx", "Vy", "Vv"]
    assert list(sc.X.lo) == [0, 0, 0, -math.pi / 2] and list(sc.X.hi) == [50, 50, 2, math.pi / 2]
    assert list(sc.U.lo) == [-1, -2] and list(sc.U.hi) == [1, 2]
    # obstacle centres and radii
    for cand, (cx, cy, R) in zip(sc.candidates[:3], [(35, 25, 7), (41, 10, 3), (10, 40, 4)]):
        assert cand.b(np.array([cx + R, cy, 0, 0, 0, 0])) == pytest.approx(0.0, abs=1e-12)
        assert cand.b(np.array([cx, cy, 0, 0, 0, 0])) == pytest.approx(-R * R)
    th = 0.3
    cos, sin = 1 - th ** 2 / 2, th - th ** 3 / 6
    z = np.array([40.0, 30.0, 1.5, th, 0, 0])
    assert sc.system.f_eval(z[:4]).ravel() == pytest.approx([1.5 * cos, 1.5 * sin, 0, 0])
    assert sc.clifs[0].V(z) == pytest.approx(2 * 1.5 * (40 - 46) * cos + 36)


def test_round_trip(tmp_path):
    for name in scenario.BUILTINS:
        sc = scenario.load(name)
        path = tmp_path / f"{name}.toml"
        scenario.save(sc, path)
        again = scenario.load(str(path))
        assert again.raw == sc.raw
        assert [c.b for c in again.candidates] == [c.b for c in sc.candidates]
        assert [c.V for c in again.clifs] == [c.V for c in sc.clifs]


def test_empty_file(tmp_path):
    p = tmp_path / "empty.toml"
    p.write_text("")
    with pytest.raises(ScenarioError):
        scenario.load(str(p))


def test_bad_expression_names_entry():
    raw = scenario.double_integrator()
    raw["candidates"][0]["b"] = "x1 + w"
    with pytest.raises(ScenarioError, match="candidates"):
        scenario.from_dict(raw)


def test_toml_syntax_error_has_position():
    with pytest.raises(ScenarioError, match="line"):
        scenario.loads("version = 1\nname = \n")


def test_initial_conditions_deterministic():
    sc = scenario.load("unicycle7")
    a, b = sc.initial_conditions(), sc.initial_conditions()
    assert a.shape == (25, 4) and np.array_equal(a, b)
    assert np.all((a[:, 2] >= 0) & (a[:, 2] <= 2)) and np.all(np.abs(a[:, 3]) <= math.pi / 2)
    assert not np.array_equal(a, sc.initial_conditions(seed=1))
