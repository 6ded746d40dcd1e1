import numpy as np

from hocbf import scenario
from hocbf.plot import csv_header, emit_svg, trajectories_csv
from hocbf.runtime import Termination, Trajectory

UNI = scenario.load("unicycle7")


def still(x0, steps=1):
    states = np.tile(np.asarray(x0, dtype=float), (steps, 1))
    z = np.zeros((steps, 2))
    return Trajectory(np.arange(steps) * 0.05, states, z, np.zeros((steps, 3)), np.ones((steps, 7)),
                      Termination.DEADLOCK)


def test_single_stationary_trajectory():
    svg = emit_svg(UNI, [still([20.0, 20.0, 0.0, 0.0])])
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 0
    assert svg.count("<circle") == 2  # start dot and goal marker
    assert svg.count('fill="#bbbbbb"') > 0  # obstacles and walls are shaded


def test_deterministic_and_counts():
    rng = np.random.default_rng(0)
    trajs = []
    for k in range(20):
        n = 30
        states = np.column_stack([np.linspace(5, 40, n) + k, np.linspace(5, 30, n), np.ones(n), np.zeros(n)])
        trajs.append(Trajectory(np.arange(n) * 0.05, states, rng.uniform(-1, 1, (n, 2)), np.zeros((n, 3)),
                                np.ones((n, 7)), Termination.HORIZON))
    a, b = emit_svg(UNI, trajs), emit_svg(UNI, trajs)
    assert a == b
    # one path in the plane plus one per input panel for each run
    assert a.count("<polyline") == 20 * 3


def test_csv_layout():
    tr = still([1.0, 2.0, 0.5, 0.1], steps=3)
    assert csv_header(UNI, tr) == ["t", "x1", "x2", "x3", "x4", "u1", "u2", "rho1", "rho2", "rho3"] + \
        [f"margin_{k}" for k in range(1, 8)]
    text = trajectories_csv(UNI, [tr, tr])
    lines = text.splitlines()
    assert len(lines) == 1 + 6 and lines[1].startswith("0,0.0,1.0,2.0")
    assert lines[-1].startswith("1,")
