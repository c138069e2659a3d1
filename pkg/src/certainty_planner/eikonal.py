"""Stationary Eikonal solves, reachable sets and descent trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .grid import (
    INF,
    DomainMask,
    GridSpec,
    Point,
    ScalarField,
    bilinear_many,
    masked_bilinear,
    upwind_descent_gradient,
)

RESIDUAL_TOL = 1e-9
SOURCE_RADIUS = 0.05


class DescentError(RuntimeError):
    """Gradient descent stalled or left the usable part of the grid."""


@dataclass(frozen=True, eq=False)
class ValueSolution:
    u: ScalarField
    sources: list[tuple[int, int]]
    max_residual: float
    mask: DomainMask
    speed: ScalarField
    cost: ScalarField
    order: np.ndarray = field(repr=False)

    @property
    def spec(self) -> GridSpec:
        return self.u.spec

    def value_at(self, p: Point) -> float:
        """Value at the node nearest to ``p``."""
        i, j = self.spec.nearest_index(p)
        return self.u[i, j]


@dataclass
class Trajectory:
    points: list[Point]
    cumulative_cost: list[float]

    @property
    def total_cost(self) -> float:
        return self.cumulative_cost[-1]

    @property
    def end(self) -> Point:
        return self.points[-1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "cumulative_cost"])
            for p, c in zip(self.points, self.cumulative_cost):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(c))])


def local_update(west: float, east: float, south: float, north: float,
                 f: float, K: float, h: float) -> float:
    """Upwind Eikonal update at one node from its four neighbor values.

    >>> round(local_update(0.0, INF, 0.0, INF, 1.0, 1.0, 1.0), 4)
    0.7071
    """
    if f <= 0 or K <= 0:
        raise ValueError("speed and cost must be positive")
    return float(_kernels.eikonal_update(min(west, east), min(south, north), K * h / f))


def snap_to_inside(spec: GridSpec, mask: DomainMask, points: Sequence[Point]) -> list[tuple[int, int]]:
    nodes = []
    for p in points:
        ij = spec.nearest_index(p)
        if ij in mask and ij not in nodes:
            nodes.append(ij)
    return nodes


def _check_positive(name: str, fld: ScalarField, mask: DomainMask, allow_zero: bool = False) -> None:
    vals = fld.values[mask.inside]
    bad = ~np.isfinite(vals) | ((vals < 0) if allow_zero else (vals <= 0))
    if bad.any():
        j, i = np.argwhere(mask.inside)[np.argmax(bad)]
        raise ValueError(f"{name} must be {'nonnegative' if allow_zero else 'positive'} "
                         f"and finite on inside nodes; bad value at node ({i}, {j})")


def source_neighborhood(spec: GridSpec, rate: np.ndarray, node: tuple[int, int],
                        radius: float, samples: int = 9) -> tuple[np.ndarray, np.ndarray]:
    """Straight-segment costs from a source node to nearby nodes.

    ``rate`` is K/f on inside nodes and ``+inf`` elsewhere. Nodes within
    ``radius`` whose segment to the source only crosses cells with usable
    corners get the Simpson-rule integral of the rate along the segment.
    Returns linear indices and values.
    """
    i0, j0 = node
    r = int(math.floor(radius / spec.h + 1e-9))
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    di, dj = di.ravel(), dj.ravel()
    keep = (di * di + dj * dj <= (radius / spec.h) ** 2 + 1e-9)
    keep &= (i0 + di >= 0) & (i0 + di < spec.nx) & (j0 + dj >= 0) & (j0 + dj < spec.ny)
    di, dj = di[keep], dj[keep]
    t = np.linspace(0.0, 1.0, samples)
    w = np.ones(samples)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    w /= w.sum()
    x0, y0 = spec.node(i0, j0)
    xs = x0 + np.outer(di * spec.h, t)
    ys = y0 + np.outer(dj * spec.h, t)
    vals = bilinear_many(rate, spec, xs, ys)
    length = np.hypot(di, dj) * spec.h
    with np.errstate(invalid="ignore"):
        cost = length * (vals @ w)
    cost[length == 0] = 0.0
    ok = np.isfinite(cost)
    return ((j0 + dj[ok]) * spec.nx + (i0 + di[ok])).astype(np.int64), cost[ok]


def solve_stationary(speed: ScalarField, cost: ScalarField, sources: Sequence[Point],
                     mask: DomainMask, source_radius: float | None = None) -> ValueSolution:
    """Fast Marching solve of |grad u| f = K with u = 0 at the snapped sources.

    With ``source_radius > 0`` nodes within that distance of a source are
    fixed to their straight-segment cost before marching.
    """
    spec = speed.spec
    _check_positive("speed", speed, mask)
    _check_positive("cost", cost, mask)
    nodes = snap_to_inside(spec, mask, sources)
    if not nodes:
        raise ValueError("no source snaps to an inside node")
    radius = SOURCE_RADIUS if source_radius is None else float(source_radius)
    if radius < 0:
        raise ValueError("source radius must be nonnegative")
    if radius > 0:
        rate = np.where(mask.inside, cost.values / np.where(mask.inside, speed.values, 1.0), INF)
        parts = [source_neighborhood(spec, rate, ij, radius) for ij in nodes]
        src = np.concatenate([p[0] for p in parts])
        vals = np.concatenate([p[1] for p in parts])
    else:
        src = np.array([j * spec.nx + i for i, j in nodes], dtype=np.int64)
        vals = np.zeros(src.size)
    f = np.ascontiguousarray(speed.values, dtype=float).ravel()
    K = np.ascontiguousarray(cost.values, dtype=float).ravel()
    inside = np.ascontiguousarray(mask.inside).ravel()
    u, order = _kernels.fast_marching(f, K, inside, src, vals, spec.nx, spec.ny, spec.h)
    is_src = np.zeros(spec.size, dtype=bool)
    is_src[src] = True
    res = _kernels.eikonal_residual(u, f, K, inside, is_src, spec.nx, spec.ny, spec.h)
    return ValueSolution(ScalarField(spec, u), nodes, float(res), mask, speed, cost, order)


def reachable_set(u_from_x0: ValueSolution, T: float) -> DomainMask:
    """Nodes with travel time from the source at most ``T``."""
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    return DomainMask(u_from_x0.spec, u_from_x0.u.values <= T)


# -- descent -----------------------------------------------------------------

def descend(values: np.ndarray, spec: GridSpec, start: Point, step: float,
            stop: Callable[[Point, float], bool],
            cost_rate: Callable[[Point], float],
            max_steps: int | None = None) -> Trajectory:
    """Midpoint-rule descent along ``-grad values`` until ``stop(p, value)``.

    Gradients are the signed upwind gradients at nodes, interpolated over
    finite corners only; steps that would land in a cell without finite
    corners, or next to an excluded node, are halved.
    """
    usable = np.isfinite(values)
    gx, gy = upwind_descent_gradient(values, spec.h)
    if max_steps is None:
        max_steps = 8 * spec.nx * spec.ny

    def direction(p):
        ax = masked_bilinear(gx, usable, spec, p)
        if ax is None:
            return None
        ay = masked_bilinear(gy, usable, spec, p)
        return ax, ay

    def valid(p):
        if not spec.contains(p):
            return False
        return spec.nearest_index(p) in _UsableView(usable)

    p = Point(*start)
    v = masked_bilinear(values, usable, spec, p)
    if v is None or not valid(p):
        raise DescentError(f"start {tuple(p)} is not in the finite part of the field")
    points, costs = [p], [0.0]
    for _ in range(max_steps):
        if stop(p, v):
            return Trajectory(points, costs)
        g1 = direction(p)
        n1 = math.hypot(*g1)
        if n1 < 1e-12:
            raise DescentError(f"descent stagnated at ({p[0]:.6g}, {p[1]:.6g})")
        s = step
        while True:
            mid = Point(p[0] - 0.5 * s * g1[0] / n1, p[1] - 0.5 * s * g1[1] / n1)
            g2 = direction(mid) if valid(mid) else None
            if g2 is not None and math.hypot(*g2) >= 1e-12:
                n2 = math.hypot(*g2)
                nxt = Point(p[0] - s * g2[0] / n2, p[1] - s * g2[1] / n2)
                if valid(nxt):
                    break
            s *= 0.5
            if s < 1e-6 * spec.h:
                raise DescentError(f"descent blocked at ({p[0]:.6g}, {p[1]:.6g})")
        seg = math.hypot(nxt[0] - p[0], nxt[1] - p[1])
        costs.append(costs[-1] + seg * cost_rate(mid))
        points.append(nxt)
        p = nxt
        v = masked_bilinear(values, usable, spec, p)
    raise DescentError(f"descent did not terminate within {max_steps} steps")


class _UsableView:
    __slots__ = ("usable",)

    def __init__(self, usable):
        self.usable = usable

    def __contains__(self, ij):
        i, j = ij
        return bool(self.usable[j, i])


def cost_rate_sampler(sol_speed: ScalarField, sol_cost: ScalarField, mask: DomainMask):
    """Callable giving K/f at a point, interpolated over inside nodes."""
    rate = np.where(mask.inside, sol_cost.values / np.where(mask.inside, sol_speed.values, 1.0), 0.0)
    spec = sol_speed.spec

    def sample(p):
        r = masked_bilinear(rate, mask.inside, spec, p)
        return 0.0 if r is None else r
    return sample


def trace_trajectory(sol: ValueSolution, start: Point, step: float | None = None) -> Trajectory:
    """Descend ``sol.u`` from ``start`` to the nearest source.

    The path ends by jumping straight onto the source node once the value
    is within one local update of zero.
    """
    spec = sol.spec
    if step is None:
        step = 0.5 * spec.h
    if not 0 < step <= spec.h:
        raise ValueError("step must lie in (0, h]")
    vals = sol.u.values
    if not math.isfinite(sol.u[spec.nearest_index(start)]):
        raise ValueError(f"start {tuple(start)} is unreachable")
    src_pts = [spec.node(i, j) for i, j in sol.sources]
    thresholds = [sol.cost[i, j] * spec.h / sol.speed[i, j] for i, j in sol.sources]
    rate = cost_rate_sampler(sol.speed, sol.cost, sol.mask)

    def nearest_source(p):
        d = [math.hypot(p[0] - s[0], p[1] - s[1]) for s in src_pts]
        k = int(np.argmin(d))
        return k, d[k]

    def stop(p, v):
        k, _ = nearest_source(p)
        return v <= thresholds[k]

    traj = descend(vals, spec, start, step, stop, rate)
    k, d = nearest_source(traj.end)
    if d > 0:
        traj.points.append(src_pts[k])
        traj.cumulative_cost.append(traj.total_cost + d * rate(traj.end))
    return traj
