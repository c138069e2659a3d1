"""Exponentially distributed certainty time.

The value u solves lam*(u - q) + f|grad u| = K with the obstacle-type cap
u <= q; nodes where the cap binds form the motionless set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .eikonal import Trajectory, _check_positive, cost_rate_sampler, descend
from .grid import INF, DomainMask, Point, ScalarField, masked_bilinear

MOTIONLESS_TOL = 1e-9


class InfeasibleStart(ValueError):
    """The start is excluded by the restricted domain."""


@dataclass(frozen=True, eq=False)
class RandomTerminationSolution:
    u_lambda: ScalarField
    motionless: np.ndarray = field(repr=False)
    lam: float
    mask: DomainMask = field(repr=False)
    q: ScalarField = field(repr=False)
    speed: ScalarField = field(repr=False)
    cost: ScalarField = field(repr=False)
    max_residual: float = 0.0
    order: np.ndarray = field(default=None, repr=False)

    @property
    def motionless_mask(self) -> DomainMask:
        return DomainMask(self.u_lambda.spec, self.motionless)

    def value_at(self, p: Point) -> float:
        return self.u_lambda[self.u_lambda.spec.nearest_index(p)]


def solve_random_termination(q: ScalarField, speed: ScalarField, lam: float, mask: DomainMask,
                             cost: ScalarField | None = None) -> RandomTerminationSolution:
    """Capped marching solve; ``cost`` defaults to zero (time after identification)."""
    if not lam > 0:
        raise ValueError(f"rate must be positive, got {lam}")
    spec = q.spec
    if cost is None:
        cost = ScalarField(spec, np.zeros(spec.shape))
    _check_positive("speed", speed, mask)
    _check_positive("cost", cost, mask, allow_zero=True)
    qv = q.values[mask.inside]
    if not np.isfinite(qv).all():
        raise ValueError("q must be finite on inside nodes")
    inside = np.ascontiguousarray(mask.inside).ravel()
    qf = np.where(inside, q.values.ravel(), INF)
    f = np.ascontiguousarray(speed.values, dtype=float).ravel()
    K = np.ascontiguousarray(cost.values, dtype=float).ravel()
    u, order = _kernels.discounted_marching(qf, f, K, inside, float(lam), spec.nx, spec.ny, spec.h)
    with np.errstate(invalid="ignore"):
        motionless = inside & (np.abs(u - qf) <= MOTIONLESS_TOL)
    res = _kernels.discounted_residual(u, qf, f, K, inside, float(lam), spec.nx, spec.ny, spec.h,
                                       motionless)
    return RandomTerminationSolution(
        ScalarField(spec, u), motionless.reshape(spec.shape), float(lam), mask, q, speed, cost,
        float(res), order)


def solve_random_termination_constrained(q: ScalarField, worst: ScalarField, speed: ScalarField,
                                         lam: float, C: float, mask: DomainMask,
                                         cost: ScalarField | None = None,
                                         x0: Point | None = None) -> RandomTerminationSolution:
    """Same solve on the domain restricted to ``worst <= C``."""
    keep = mask.inside & (worst.values <= C)
    if x0 is not None:
        i, j = q.spec.nearest_index(x0)
        if not keep[j, i]:
            raise InfeasibleStart(f"start excluded by worst-case bound C={C}")
    if not keep.any():
        raise InfeasibleStart(f"no node satisfies the worst-case bound C={C}")
    return solve_random_termination(q, speed, lam, DomainMask(q.spec, keep), cost)


def trace_to_motionless(sol: RandomTerminationSolution, start: Point,
                        step: float | None = None) -> Trajectory:
    """Descend u_lambda from ``start`` until the nearest node is motionless."""
    spec = sol.u_lambda.spec
    step = 0.5 * spec.h if step is None else step
    vals = np.where(sol.mask.inside, sol.u_lambda.values, INF)
    motionless = sol.motionless
    rate = cost_rate_sampler(sol.speed, ScalarField(spec, np.ones(spec.shape)), sol.mask)

    def stop(p, v):
        i, j = spec.nearest_index(p)
        return bool(motionless[j, i])

    traj = descend(vals, spec, start, step, stop, rate)
    i, j = spec.nearest_index(traj.end)
    node = spec.node(i, j)
    d = math.hypot(node[0] - traj.end[0], node[1] - traj.end[1])
    if d > 0:
        traj.points.append(node)
        traj.cumulative_cost.append(traj.total_cost + d * rate(traj.end))
    return traj


def max_along(field_: ScalarField, points: Sequence[Point], usable: np.ndarray) -> float:
    spec = field_.spec
    vals = [masked_bilinear(field_.values, usable, spec, p) for p in points]
    return max(v for v in vals if v is not None)


@dataclass
class ExponentialParetoEntry:
    C: float
    worst: float
    average: float
    waypoint: Point


def exponential_pareto(q: ScalarField, worst: ScalarField, speed: ScalarField, lam: float,
                       C_values: Sequence[float], x0: Point, mask: DomainMask,
                       cost: ScalarField | None = None):
    """(worst along path, u^{lam,C}(x0)) for each C, dominated pairs removed.

    Returns ``(front, evaluated)`` where ``evaluated`` keeps every feasible C.
    """
    from .robust import ParetoFront

    evaluated: list[ExponentialParetoEntry] = []
    for C in sorted(C_values):
        try:
            sol = solve_random_termination_constrained(q, worst, speed, lam, C, mask, cost, x0)
        except InfeasibleStart:
            continue
        traj = trace_to_motionless(sol, x0)
        usable = sol.mask.inside
        w = max_along(worst, traj.points, usable)
        evaluated.append(ExponentialParetoEntry(float(C), w, sol.value_at(x0), traj.end))
    pairs = [(e.worst, e.average, k) for k, e in enumerate(evaluated)]
    return ParetoFront.from_pairs(pairs), evaluated
