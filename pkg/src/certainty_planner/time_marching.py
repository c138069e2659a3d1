"""Backward time marching for the time-dependent Eikonal equation and the
fixed / discretely-random certainty-time planners built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .eikonal import reachable_set
from .grid import (
    INF,
    DomainMask,
    GridSpec,
    Point,
    ScalarField,
    masked_bilinear,
    upwind_descent_gradient,
    upwind_gradient_array,
)

CFL = 0.4


@dataclass(frozen=True)
class CertaintyTimeModel:
    """When the target is revealed: a fixed time, a finite distribution, or exponential."""

    kind: str
    T: float | None = None
    times: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()
    rate: float | None = None

    def __post_init__(self):
        if self.kind == "fixed":
            if self.T is None or not self.T > 0:
                raise ValueError("fixed certainty time needs T > 0")
        elif self.kind == "discrete":
            object.__setattr__(self, "times", tuple(float(t) for t in self.times))
            object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
            validate_discrete(self.times, self.probs)
        elif self.kind == "exponential":
            if self.rate is None or not self.rate > 0:
                raise ValueError("exponential certainty time needs rate > 0")
        else:
            raise ValueError(f"unknown certainty-time model {self.kind!r}")

    @classmethod
    def fixed(cls, T: float) -> "CertaintyTimeModel":
        return cls("fixed", T=float(T))

    @classmethod
    def discrete(cls, times: Sequence[float], probs: Sequence[float]) -> "CertaintyTimeModel":
        return cls("discrete", times=tuple(times), probs=tuple(probs))

    @classmethod
    def exponential(cls, rate: float) -> "CertaintyTimeModel":
        return cls("exponential", rate=float(rate))

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "T": self.T}
        if self.kind == "discrete":
            return {"kind": "discrete", "times": list(self.times), "probs": list(self.probs)}
        return {"kind": "exponential", "rate": self.rate}

    @classmethod
    def from_dict(cls, d: dict) -> "CertaintyTimeModel":
        kind = d["kind"]
        if kind == "fixed":
            return cls.fixed(d["T"])
        if kind == "discrete":
            return cls.discrete(d["times"], d["probs"])
        if kind == "exponential":
            return cls.exponential(d["rate"])
        raise ValueError(f"unknown certainty-time model {kind!r}")


def validate_discrete(times: Sequence[float], probs: Sequence[float]) -> None:
    if len(times) == 0 or len(times) != len(probs):
        raise ValueError("times and probs must be non-empty and of equal length")
    if any(p <= 0 for p in probs):
        raise ValueError("all certainty-time probabilities must be positive")
    if abs(math.fsum(probs) - 1.0) > 1e-9:
        raise ValueError(f"certainty-time probabilities sum to {math.fsum(probs)}, not 1")
    if times[0] <= 0 or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("certainty times must be positive and strictly increasing")


@dataclass(frozen=True, eq=False)
class TimeSlicedValue:
    """Value slices at descending time levels; ``slices[0]`` is the terminal one."""

    spec: GridSpec
    times: np.ndarray
    slices: np.ndarray = field(repr=False)

    @property
    def t_end(self) -> float:
        return float(self.times[0])

    @property
    def t_start(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[0] - self.times[1]) if len(self.times) > 1 else 0.0

    def level(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def slice_at(self, t: float) -> ScalarField:
        return ScalarField(self.spec, self.slices[self.level(t)])

    def initial(self) -> ScalarField:
        return ScalarField(self.spec, self.slices[-1])

    def value_at(self, p: Point, t: float) -> float:
        i, j = self.spec.nearest_index(p)
        return float(self.slices[self.level(t)][j, i])


def stable_dt(spec: GridSpec, speed: ScalarField, mask: DomainMask) -> float:
    return CFL * spec.h / float(np.max(speed.values[mask.inside]))


def march_backward(terminal: ScalarField, speed: ScalarField, cost: ScalarField,
                   t_end: float, t_start: float, mask: DomainMask,
                   dt: float | None = None) -> TimeSlicedValue:
    """Explicit upwind marching of u_t - f|grad u| + K = 0 from ``t_end`` down to ``t_start``.

    Nodes outside ``mask`` or with a ``+inf`` terminal value stay ``+inf``.
    The step is shrunk so the interval holds a whole number of steps.
    """
    if not t_start < t_end:
        raise ValueError("t_start must precede t_end")
    spec = terminal.spec
    bound = stable_dt(spec, speed, mask)
    if dt is None:
        dt = bound
    elif dt > bound * (1 + 1e-12):
        raise ValueError(f"time step {dt} exceeds the stability bound {bound}")
    span = t_end - t_start
    n = max(1, math.ceil(span / dt - 1e-9))
    dt = span / n
    live = mask.inside & np.isfinite(terminal.values)
    f = np.where(live, speed.values, 0.0)
    K = np.where(live, cost.values, 0.0)
    out = np.empty((n + 1,) + spec.shape)
    out[0] = np.where(mask.inside, terminal.values, INF)
    U = out[0].copy()
    for k in range(1, n + 1):
        g = upwind_gradient_array(U, spec.h)
        with np.errstate(invalid="ignore"):
            U = np.where(live, U + dt * (K - f * g), INF)
        out[k] = U
    times = t_end - dt * np.arange(n + 1)
    times[-1] = t_start
    return TimeSlicedValue(spec, times, out)


# -- fixed certainty time -----------------------------------------------------

@dataclass
class FixedTPlan:
    """``expected_total`` is T + q at the waypoint; ``marched_value`` is the
    time-marched value at the start when requested."""

    T: float
    waypoint: Point
    waypoint_index: tuple[int, int]
    expected_total: float
    reachable: DomainMask = field(repr=False)
    marched_value: float | None = None


def argmin_on(field_: ScalarField, mask: DomainMask) -> tuple[int, int]:
    """Minimizing node of ``field_`` over ``mask``; ties go to the lowest linear index."""
    vals = np.where(mask.inside, field_.values, INF).ravel()
    k = int(np.argmin(vals))
    if not math.isfinite(vals[k]):
        raise ValueError("field is +inf everywhere on the mask")
    return field_.spec.unravel(k)


def plan_fixed_T(scenario, T: float, march: bool = False) -> FixedTPlan:
    """Best waypoint for a known certainty time with unit running cost."""
    if not T > 0:
        raise ValueError("T must be positive")
    q = scenario.q
    reach = reachable_set(scenario.start_solution, T)
    i, j = argmin_on(q, reach)
    marched = march_fixed_T(scenario, T).value_at(scenario.x0, 0.0) if march else None
    return FixedTPlan(T, q.spec.node(i, j), (i, j), T + q[i, j], reach, marched)


def march_fixed_T(scenario, T: float) -> TimeSlicedValue:
    return march_backward(scenario.q, scenario.speed, scenario.unit_cost, T, 0.0, scenario.mask)


# -- stage chains ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Stage:
    """One certainty time: with conditional probability ``weight`` the
    remaining cost becomes ``reveal``; otherwise planning continues."""

    time: float
    weight: float
    reveal: ScalarField


@dataclass
class ChainPlan:
    stages: list[TimeSlicedValue]
    waypoints: list[Point]
    path: list[Point]
    value_at_start: float


def march_chain(stages: Sequence[Stage], speed: ScalarField, cost: ScalarField,
                mask: DomainMask) -> list[TimeSlicedValue]:
    """Solve the stage values v_j backward; returns them in forward order."""
    if not stages:
        raise ValueError("need at least one stage")
    if stages[-1].weight != 1.0:
        raise ValueError("the last stage must reveal with certainty")
    out: list[TimeSlicedValue] = [None] * len(stages)  # type: ignore[list-item]
    nxt = None
    for j in range(len(stages) - 1, -1, -1):
        st = stages[j]
        if nxt is None:
            terminal = st.reveal
        else:
            w = st.weight
            carried = nxt.initial().values
            with np.errstate(invalid="ignore"):
                blend = (1.0 - w) * carried + w * st.reveal.values
            terminal = ScalarField(st.reveal.spec, np.where(np.isnan(blend), INF, blend))
        t0 = stages[j - 1].time if j > 0 else 0.0
        nxt = march_backward(terminal, speed, cost, st.time, t0, mask)
        out[j] = nxt
    return out


def follow_time_dependent(stages: Sequence[TimeSlicedValue], speed: ScalarField,
                          mask: DomainMask, start: Point) -> tuple[list[Point], list[Point]]:
    """Integrate the optimal motion forward through the stage values.

    Within a time step the direction is ``-grad v`` of the slice at the
    step's start; speed is the local ``f``. Returns the positions reached
    at each stage end and the full path.
    """
    spec = speed.spec
    usable = mask.inside
    fvals = np.where(usable, speed.values, 0.0)
    p = Point(*start)
    path = [p]
    waypoints = []
    for tv in stages:
        for k in range(len(tv.times) - 1, 0, -1):
            dt = float(tv.times[k - 1] - tv.times[k])
            vals = tv.slices[k]
            gx, gy = upwind_descent_gradient(vals, spec.h)
            fin = np.isfinite(vals) & usable
            p = _timed_step(p, gx, gy, fin, fvals, spec, dt)
            path.append(p)
        waypoints.append(p)
    return waypoints, path


def _timed_step(p, gx, gy, usable, fvals, spec, dt):
    def direction(pt):
        if not spec.contains(pt) or not usable[spec.nearest_index(pt)[::-1]]:
            return None
        ax = masked_bilinear(gx, usable, spec, pt)
        if ax is None:
            return None
        return ax, masked_bilinear(gy, usable, spec, pt)

    g = direction(p)
    if g is None or math.hypot(*g) < 1e-12:
        return p
    fv = masked_bilinear(fvals, usable, spec, p) or 0.0
    s = fv * dt
    while s > 1e-6 * spec.h:
        n1 = math.hypot(*g)
        mid = Point(p[0] - 0.5 * s * g[0] / n1, p[1] - 0.5 * s * g[1] / n1)
        g2 = direction(mid)
        if g2 is not None and math.hypot(*g2) >= 1e-12:
            n2 = math.hypot(*g2)
            nxt = Point(float(p[0] - s * g2[0] / n2), float(p[1] - s * g2[1] / n2))
            if direction(nxt) is not None:
                return nxt
        s *= 0.5
    return p


def plan_stage_chain(scenario, stages: Sequence[Stage]) -> ChainPlan:
    sols = march_chain(stages, scenario.speed, scenario.unit_cost, scenario.mask)
    waypoints, path = follow_time_dependent(sols, scenario.speed, scenario.mask, scenario.x0)
    value = sols[0].value_at(scenario.x0, 0.0)
    return ChainPlan(sols, waypoints, path, value)


def discrete_stages(q: ScalarField, times: Sequence[float], probs: Sequence[float]) -> list[Stage]:
    """Stages for a discrete certainty time: reveal weight p_j / sum_{l>=j} p_l."""
    validate_discrete(times, probs)
    r = len(times)
    stages = []
    for j in range(r):
        w = 1.0 if j == r - 1 else probs[j] / math.fsum(probs[j:])
        stages.append(Stage(float(times[j]), w, q))
    return stages


def plan_discrete_T(scenario, times: Sequence[float], probs: Sequence[float]) -> ChainPlan:
    """Waypoints for a discretely distributed certainty time."""
    return plan_stage_chain(scenario, discrete_stages(scenario.q, times, probs))
