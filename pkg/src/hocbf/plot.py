"""Trajectory CSV files and a dependency-free, deterministic SVG plot."""
from __future__ import annotations

import csv
import io
from typing import List, Sequence

import numpy as np

from .runtime import Trajectory
from .system import pad_states

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]


def csv_header(scenario, traj: Trajectory) -> List[str]:
    n, m, K = scenario.space.n, scenario.space.m, traj.slacks.shape[1]
    return (["t"] + [f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(m)]
            + [f"rho{k + 1}" for k in range(K)] + [f"margin_{k + 1}" for k in range(traj.margins.shape[1])])


def trajectories_csv(scenario, trajs: Sequence[Trajectory]) -> str:
    """All runs in one table; a leading ``run`` column separates them."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not trajs:
        return ""
    w.writerow(["run"] + csv_header(scenario, trajs[0]))
    for k, tr in enumerate(trajs):
        block = np.column_stack([tr.times, tr.states, tr.inputs, tr.slacks, tr.margins])
        for row in block:
            w.writerow([k] + [repr(float(v)) for v in row])
    return buf.getvalue()


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Panel:
    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim = xlim, ylim

    def X(self, x):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - lo) / (hi - lo) * self.w

    def Y(self, y):
        lo, hi = self.ylim
        return self.y0 + self.h - (np.asarray(y, dtype=float) - lo) / (hi - lo) * self.h

    def polyline(self, xs, ys, color, width=1.2):
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(self.X(xs), self.Y(ys)))
        return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'

    def frame(self, title):
        return (f'<rect x="{_fmt(self.x0)}" y="{_fmt(self.y0)}" width="{_fmt(self.w)}" height="{_fmt(self.h)}" '
                f'fill="none" stroke="black"/>'
                f'<text x="{_fmt(self.x0)}" y="{_fmt(self.y0 - 6)}" font-size="12">{title}</text>')


def _unsafe_cells(scenario, plane, res=120):
    """Grid cells of the plot plane where a candidate depending only on the plane is negative."""
    space = scenario.space
    ix, iy = (space.index(v) for v in plane)
    X = scenario.X
    lo = {v: l for v, l in zip(X.variables, X.lo)}
    hi = {v: h for v, h in zip(X.variables, X.hi)}
    xs = np.linspace(lo[plane[0]], hi[plane[0]], res + 1)
    ys = np.linspace(lo[plane[1]], hi[plane[1]], res + 1)
    cx, cy = 0.5 * (xs[1:] + xs[:-1]), 0.5 * (ys[1:] + ys[:-1])
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    pts = np.zeros((gx.size, space.n))
    pts[:, ix] = gx.ravel()
    pts[:, iy] = gy.ravel()
    full = pad_states(space, pts)
    bad = np.zeros(gx.size, dtype=bool)
    for cand in scenario.candidates:
        used = {k for e in cand.b.terms for k, p in enumerate(e) if p}
        if used <= {ix, iy}:
            bad |= cand.b.eval_many(full) < 0
    return xs, ys, bad.reshape(gx.shape)


def emit_svg(scenario, trajs: Sequence[Trajectory], plane=None) -> str:
    """Left: paths in a plane of two states with unsafe regions shaded. Right: inputs over time."""
    if not trajs:
        raise ValueError("at least one trajectory is required")
    space = scenario.space
    plane = tuple(plane or (space.states[:2] if space.n >= 2 else (space.states[0], space.states[0])))
    ix, iy = (space.index(v) for v in plane)
    X = scenario.X
    lo = {v: l for v, l in zip(X.variables, X.lo)}
    hi = {v: h for v, h in zip(X.variables, X.hi)}
    W, H = 900, 460
    main = _Panel(40, 30, 400, 400, (lo[plane[0]], hi[plane[0]]), (lo[plane[1]], hi[plane[1]]))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           '<rect width="100%" height="100%" fill="white"/>']
    xs, ys, bad = _unsafe_cells(scenario, plane)
    for i in range(bad.shape[0]):
        # one rectangle per vertical run of unsafe cells
        col = np.concatenate([[False], bad[i], [False]]).astype(int)
        edges = np.diff(col)
        for j0, j1 in zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]):
            x0, x1 = main.X(xs[i]), main.X(xs[i + 1])
            y0, y1 = main.Y(ys[j1]), main.Y(ys[j0])
            out.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(x1 - x0)}" height="{_fmt(y1 - y0)}" '
                       f'fill="#bbbbbb" stroke="none"/>')
    out.append(main.frame(f"{plane[0]} - {plane[1]}"))
    if plane[0] in scenario.goal and plane[1] in scenario.goal:
        gx, gy = main.X(scenario.goal[plane[0]]), main.Y(scenario.goal[plane[1]])
        out.append(f'<circle cx="{_fmt(gx)}" cy="{_fmt(gy)}" r="5" fill="none" stroke="black" stroke-width="2"/>')
    for k, tr in enumerate(trajs):
        color = PALETTE[k % len(PALETTE)]
        px, py = tr.states[:, ix], tr.states[:, iy]
        if len(tr) > 1:
            out.append(main.polyline(px, py, color))
        out.append(f'<circle cx="{_fmt(main.X(px[0]))}" cy="{_fmt(main.Y(py[0]))}" r="2.5" fill="{color}"/>')
    # input panels
    m = space.m
    t_end = max(float(tr.times[-1]) for tr in trajs) or 1.0
    ph = (400 - 20 * (m - 1)) / max(m, 1)
    U = scenario.U
    ulo = {v: l for v, l in zip(U.variables, U.lo)}
    uhi = {v: h for v, h in zip(U.variables, U.hi)}
    for k, name in enumerate(space.inputs):
        umax = max(float(np.max(np.abs(tr.inputs[:, k]), initial=0.0)) for tr in trajs)
        a, b = ulo.get(name, -umax or -1.0), uhi.get(name, umax or 1.0)
        pad = 0.1 * (b - a)
        panel = _Panel(500, 30 + k * (ph + 20), 380, ph, (0.0, t_end), (a - pad, b + pad))
        out.append(panel.frame(name))
        for lim in (a, b):
            out.append(f'<line x1="{_fmt(panel.x0)}" x2="{_fmt(panel.x0 + panel.w)}" y1="{_fmt(panel.Y(lim))}" '
                       f'y2="{_fmt(panel.Y(lim))}" stroke="black" stroke-dasharray="4,3"/>')
        for j, tr in enumerate(trajs):
            if len(tr) > 1:
                out.append(panel.polyline(tr.times, tr.inputs[:, k], PALETTE[j % len(PALETTE)], 0.8))
    out.append("</svg>")
    return "\n".join(out) + "\n"
