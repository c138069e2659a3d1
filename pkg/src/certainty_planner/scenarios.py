"""Scenario definitions: geometry, speed and cost models, targets and planner parameters.

A scenario is a plain description that round-trips through JSON; the
solved fields are derived lazily and cached on the instance.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .eikonal import ValueSolution, solve_stationary
from .grid import DomainMask, GridSpec, Point, ScalarField, build_field, rectangle_mask
from .robust import TargetEnsemble, expected_field, validate_probs
from .time_marching import CertaintyTimeModel, Stage

DEFAULT_GRID = 201
CONFIG_PACKAGE = "certainty_planner.scenario_configs"


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario description."""


# -- speed and cost models ----------------------------------------------------

def speed_formula(spec: dict):
    kind = spec.get("kind")
    if kind == "constant":
        v = float(spec["value"])
        return lambda x, y: v + 0.0 * x
    if kind == "cos_sin":
        a, b = float(spec["a"]), float(spec["b"])
        return lambda x, y: a + b * np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y)
    raise ScenarioError(f"unknown speed kind {kind!r}")


@dataclass(frozen=True)
class StormSpec:
    """Elliptic region ``(x - c)^T A (x - c) < 1`` where the running cost rises."""

    center: Point
    A: tuple[tuple[float, float], tuple[float, float]]
    alpha: float = 2.0
    gamma: float = 2.5

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.shape != (2, 2) or not np.allclose(A, A.T, rtol=0, atol=0):
            raise ScenarioError("storm shape matrix must be symmetric 2x2")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ScenarioError("storm shape matrix must be positive definite")
        if not (self.alpha > 0 and self.gamma > 0):
            raise ScenarioError("storm alpha and gamma must be positive")

    @classmethod
    def from_axes(cls, center, semi_axes, angle, alpha=2.0, gamma=2.5) -> "StormSpec":
        """Ellipse with semi-axes ``(a, b)`` rotated by ``angle`` radians."""
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s], [s, c]])
        A = R @ np.diag([1 / semi_axes[0] ** 2, 1 / semi_axes[1] ** 2]) @ R.T
        A = 0.5 * (A + A.T)
        return cls(Point(*center), ((float(A[0, 0]), float(A[0, 1])), (float(A[0, 1]), float(A[1, 1]))),
                   alpha, gamma)

    def quadratic(self, x, y):
        (a, b), (_, d) = self.A
        dx, dy = x - self.center[0], y - self.center[1]
        return a * dx * dx + 2 * b * dx * dy + d * dy * dy

    def cost(self, x, y):
        s = self.quadratic(x, y)
        return 1.0 + self.alpha * np.maximum(1.0 - s, 0.0) ** self.gamma

    def to_dict(self) -> dict:
        return {"kind": "storm", "center": list(self.center), "A": [list(r) for r in self.A],
                "alpha": self.alpha, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "StormSpec":
        return cls(Point(*d["center"]), tuple(tuple(float(v) for v in r) for r in d["A"]),
                   float(d.get("alpha", 2.0)), float(d.get("gamma", 2.5)))


def cost_formula(spec: dict):
    kind = spec.get("kind")
    if kind == "constant":
        v = float(spec["value"])
        return lambda x, y: v + 0.0 * x
    if kind == "storm":
        return StormSpec.from_dict(spec).cost
    raise ScenarioError(f"unknown cost kind {kind!r}")


def _threads() -> int:
    env = os.environ.get("PLANNER_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ScenarioError(f"PLANNER_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def solve_many(jobs: Sequence[tuple[ScalarField, ScalarField, Point]], mask: DomainMask) -> list[ValueSolution]:
    """Independent stationary solves ``(speed, cost, source)``; results keep job order."""
    workers = min(len(jobs), _threads())
    if workers <= 1:
        return [solve_stationary(f, K, [s], mask) for f, K, s in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda job: solve_stationary(job[0], job[1], [job[2]], mask), jobs))


# -- scenario ----------------------------------------------------------------

_CACHED = ("mask", "speed", "unit_cost", "start_solution", "target_solutions")


@dataclass(frozen=True)
class ScenarioDef:
    """Everything needed to rebuild a planning instance.

    Either ``targets`` lists several potential targets sharing ``cost``,
    or ``cost_hypotheses`` lists several running costs for one target.
    """

    name: str
    x0: Point
    targets: tuple[Point, ...]
    probs: tuple[float, ...]
    n: int = DEFAULT_GRID
    obstacles: tuple[tuple[float, float, float, float], ...] = ()
    speed_model: dict = field(default_factory=lambda: {"kind": "constant", "value": 1.0})
    cost_model: dict = field(default_factory=lambda: {"kind": "constant", "value": 1.0})
    cost_hypotheses: tuple[dict, ...] = ()
    time_model: CertaintyTimeModel | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x0", Point(*map(float, self.x0)))
        object.__setattr__(self, "targets", tuple(Point(*map(float, t)) for t in self.targets))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        object.__setattr__(self, "obstacles", tuple(tuple(float(v) for v in r) for r in self.obstacles))
        object.__setattr__(self, "cost_hypotheses", tuple(self.cost_hypotheses))
        if self.n < 3:
            raise ScenarioError("grid must have at least 3 nodes per side")
        if not self.targets:
            raise ScenarioError("scenario needs at least one target")
        hyp = len(self.cost_hypotheses)
        m = hyp if hyp else len(self.targets)
        if hyp and len(self.targets) != 1:
            raise ScenarioError("cost hypotheses share a single target")
        if len(self.probs) != m:
            raise ScenarioError(f"expected {m} probabilities, got {len(self.probs)}")
        try:
            validate_probs(self.probs)
        except ValueError as e:
            raise ScenarioError(str(e)) from None
        for r in self.obstacles:
            if len(r) != 4 or not (r[0] < r[1] and r[2] < r[3]):
                raise ScenarioError(f"bad obstacle rectangle {r}")

    # -- derived quantities (cached) --

    @property
    def grid(self) -> GridSpec:
        return GridSpec.unit_square(self.n)

    @property
    def m(self) -> int:
        return len(self.probs)

    @cached_property
    def mask(self) -> DomainMask:
        mask = rectangle_mask(self.grid, self.obstacles)
        for label, p in [("x0", self.x0)] + [(f"target {k + 1}", t) for k, t in enumerate(self.targets)]:
            if not self.grid.contains(p) or self.grid.nearest_index(p) not in mask:
                raise ScenarioError(f"{label} {tuple(p)} is not inside the domain")
        return mask

    @cached_property
    def speed(self) -> ScalarField:
        return build_field(self.grid, speed_formula(self.speed_model), self.mask)

    @cached_property
    def unit_cost(self) -> ScalarField:
        return build_field(self.grid, lambda x, y: 1.0 + 0.0 * x, self.mask)

    @property
    def cost(self) -> ScalarField:
        return build_field(self.grid, cost_formula(self.cost_model), self.mask)

    def hypothesis_costs(self) -> list[ScalarField]:
        return [build_field(self.grid, cost_formula(c), self.mask) for c in self.cost_hypotheses]

    @cached_property
    def start_solution(self) -> ValueSolution:
        """Travel time from ``x0`` (unit cost), which defines the reachable sets."""
        return solve_stationary(self.speed, self.unit_cost, [self.x0], self.mask)

    @cached_property
    def target_solutions(self) -> list[ValueSolution]:
        if self.cost_hypotheses:
            jobs = [(self.speed, K, self.targets[0]) for K in self.hypothesis_costs()]
        else:
            K = self.cost
            jobs = [(self.speed, K, t) for t in self.targets]
        return solve_many(jobs, self.mask)

    @property
    def ensemble(self) -> TargetEnsemble:
        targets = self.targets * self.m if self.cost_hypotheses else self.targets
        return TargetEnsemble(targets, self.probs, tuple(s.u for s in self.target_solutions))

    @property
    def q(self) -> ScalarField:
        return expected_field(self.ensemble)

    @property
    def max_residual(self) -> float:
        return max([self.start_solution.max_residual] + [s.max_residual for s in self.target_solutions])

    def param(self, key: str, default=None):
        return self.extras.get(key, default)

    # -- variants --

    def _carry(self, other: "ScenarioDef", names) -> "ScenarioDef":
        for name in names:
            if name in self.__dict__:
                other.__dict__[name] = self.__dict__[name]
        return other

    def with_probs(self, probs: Sequence[float]) -> "ScenarioDef":
        """Same geometry with new target probabilities; solved fields are reused."""
        return self._carry(dataclasses.replace(self, probs=tuple(probs)), _CACHED)

    def with_grid(self, n: int) -> "ScenarioDef":
        return dataclasses.replace(self, n=int(n))

    def with_time_model(self, model: CertaintyTimeModel | None) -> "ScenarioDef":
        return self._carry(dataclasses.replace(self, time_model=model), _CACHED)

    # -- serialization --

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "name": self.name,
            "grid": {"n": self.n},
            "x0": list(self.x0),
            "targets": [list(t) for t in self.targets],
            "probs": list(self.probs),
            "obstacles": [list(r) for r in self.obstacles],
            "speed": dict(self.speed_model),
            "cost": dict(self.cost_model),
        }
        if self.cost_hypotheses:
            d["cost_hypotheses"] = [dict(c) for c in self.cost_hypotheses]
        d["time_model"] = None if self.time_model is None else self.time_model.to_dict()
        d["extras"] = json.loads(json.dumps(self.extras))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioDef":
        try:
            tm = d.get("time_model")
            return cls(
                name=str(d["name"]),
                x0=Point(*d["x0"]),
                targets=tuple(Point(*t) for t in d["targets"]),
                probs=tuple(d["probs"]),
                n=int(d.get("grid", {}).get("n", DEFAULT_GRID)),
                obstacles=tuple(tuple(r) for r in d.get("obstacles", [])),
                speed_model=dict(d.get("speed", {"kind": "constant", "value": 1.0})),
                cost_model=dict(d.get("cost", {"kind": "constant", "value": 1.0})),
                cost_hypotheses=tuple(dict(c) for c in d.get("cost_hypotheses", [])),
                time_model=None if tm is None else CertaintyTimeModel.from_dict(tm),
                extras=dict(d.get("extras", {})),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"invalid scenario config: {e}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioDef":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ScenarioError(f"config is not valid JSON: {e}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioDef":
        return cls.from_json(Path(path).read_text())


# -- the catalog ---------------------------------------------------------------

MAIN_TARGETS = (Point(0.5, 0.95), Point(0.9, 0.5), Point(0.5, 0.05), Point(0.1, 0.5))
MAIN_OBSTACLE = (0.45, 0.55, 0.15, 0.85)
MAIN_X0 = Point(0.3, 0.2)


def paper_main_scenario(n: int = DEFAULT_GRID) -> ScenarioDef:
    return ScenarioDef(
        name="paper_main",
        x0=MAIN_X0,
        targets=MAIN_TARGETS,
        probs=(0.2, 0.3, 0.2, 0.3),
        n=n,
        obstacles=(MAIN_OBSTACLE,),
        speed_model={"kind": "cos_sin", "a": 1.4, "b": 0.6},
        time_model=CertaintyTimeModel.fixed(0.4),
        extras={
            "T": 0.4,
            "C_hard": 0.56,
            "chance": {"C": 0.365, "epsilon": 0.25, "probs": [0.18, 0.18, 0.35, 0.29]},
            "lambdas": [2.5, 20.0, 30.0],
            "lambda_constrained": 2.5,
            "betas": [0.1, 1.0, 10.0, 100.0],
            "deltas": [0.02, 0.1],
            "delta_sweep": {"start": 0.0, "stop": 0.8, "count": 40},
        },
    )


# Illustrative storms: the source sits at (0.1, 0.1) with f = 1, so every
# region below keeps a distance of more than 0.4 from it.
DEFAULT_STORMS = (
    StormSpec.from_axes((0.55, 0.55), (0.25, 0.08), -math.pi / 4),
    StormSpec.from_axes((0.72, 0.38), (0.2, 0.07), math.pi / 4),
    StormSpec.from_axes((0.38, 0.72), (0.2, 0.07), math.pi / 4),
)


def storm_scenario(probs: Sequence[float] = (0.8, 0.1, 0.1), n: int = DEFAULT_GRID,
                   storms: Sequence[StormSpec] = DEFAULT_STORMS) -> ScenarioDef:
    if len(probs) != len(storms):
        raise ScenarioError(f"need one probability per storm ({len(storms)}), got {len(probs)}")
    return ScenarioDef(
        name="storm",
        x0=Point(0.1, 0.1),
        targets=(Point(0.9, 0.9),),
        probs=tuple(probs),
        n=n,
        cost_hypotheses=tuple(s.to_dict() for s in storms),
        time_model=CertaintyTimeModel.fixed(0.4),
        extras={"T": 0.4},
    )


DRONE_SPEED = 5.0 / 3.0
DRONE_ORDER = (3, 4, 2)


def drone_times(x0: Point, targets: Sequence[Point], order: Sequence[int] = DRONE_ORDER,
                speed: float = DRONE_SPEED) -> list[float]:
    """Straight-line arrival times of drones sent to ``order`` (1-based target numbers)."""
    return [math.hypot(targets[k - 1][0] - x0[0], targets[k - 1][1] - x0[1]) / speed for k in order]


def drone_rescue_scenario(n: int = DEFAULT_GRID, probs: Sequence[float] = (0.2, 0.3, 0.2, 0.3)) -> ScenarioDef:
    """Main geometry; drones reveal the visited sites one by one."""
    times = drone_times(MAIN_X0, MAIN_TARGETS)
    p = list(probs)
    reveal = [p[k - 1] for k in DRONE_ORDER[:-1]]
    reveal.append(math.fsum(p) - math.fsum(reveal))
    return ScenarioDef(
        name="drone_rescue",
        x0=MAIN_X0,
        targets=MAIN_TARGETS,
        probs=tuple(p),
        n=n,
        obstacles=(MAIN_OBSTACLE,),
        speed_model={"kind": "cos_sin", "a": 1.4, "b": 0.6},
        time_model=CertaintyTimeModel.discrete(times, reveal),
        extras={"drone_speed": DRONE_SPEED, "drone_order": list(DRONE_ORDER)},
    )


def drone_stages(sc: ScenarioDef) -> list[Stage]:
    """Stage chain for sequential site checks.

    At the j-th drone arrival the visited site is confirmed with probability
    proportional to its share of the still-unexcluded mass; at the last
    arrival the remaining sites are resolved among themselves.
    """
    order = [k - 1 for k in sc.param("drone_order", list(DRONE_ORDER))]
    speed = sc.param("drone_speed", DRONE_SPEED)
    times = drone_times(sc.x0, sc.targets, [k + 1 for k in order], speed)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ScenarioError("drone arrival times must increase along the visiting order")
    fields = [s.u for s in sc.target_solutions]
    p = sc.probs
    remaining = list(range(sc.m))
    stages = []
    for j, k in enumerate(order):
        if j == len(order) - 1:
            mass = math.fsum(p[i] for i in remaining)
            vals = sum((p[i] / mass) * fields[i].values for i in remaining)
            stages.append(Stage(times[j], 1.0, ScalarField(sc.grid, vals)))
        else:
            w = p[k] / math.fsum(p[i] for i in remaining)
            stages.append(Stage(times[j], w, fields[k]))
            remaining.remove(k)
    return stages


def bad_dr_scenario(n: int = DEFAULT_GRID) -> ScenarioDef:
    return ScenarioDef(
        name="bad_dr",
        x0=MAIN_X0,
        targets=(Point(0.45, 0.95),) + MAIN_TARGETS[1:],
        probs=(0.17, 0.35, 0.3, 0.18),
        n=n,
        obstacles=(MAIN_OBSTACLE,),
        speed_model={"kind": "cos_sin", "a": 1.4, "b": -0.6},
        time_model=CertaintyTimeModel.fixed(0.4),
        extras={"T": 0.4, "C_hard": 0.53, "delta_sweep": {"start": 0.0, "stop": 1.0, "count": 100}},
    )


BUILTINS = {
    "paper_main": paper_main_scenario,
    "storm": storm_scenario,
    "drone_rescue": drone_rescue_scenario,
    "bad_dr": bad_dr_scenario,
}


def delta_sweep(sc: ScenarioDef) -> np.ndarray:
    d = sc.param("delta_sweep", {"start": 0.0, "stop": 0.8, "count": 40})
    return np.linspace(d["start"], d["stop"], int(d["count"]))


def load_scenario(ref: str, n: int | None = None) -> ScenarioDef:
    """Built-in name, shipped config name, or path to a JSON config."""
    if ref in BUILTINS:
        sc = BUILTINS[ref]()
    elif Path(ref).is_file():
        sc = ScenarioDef.load(ref)
    else:
        cfg = resources.files(CONFIG_PACKAGE) / f"{ref}.json"
        if not cfg.is_file():
            raise ScenarioError(f"unknown scenario {ref!r}")
        sc = ScenarioDef.from_json(cfg.read_text())
    return sc if n is None else sc.with_grid(n)


def fine_cloud(sc: ScenarioDef, radius: float, per_side: int = 3):
    """Refine each target into a ``per_side`` x ``per_side`` cluster within ``radius``.

    Returns ``(points, weights, assignment)``; cluster weights split the
    target's probability evenly.
    """
    if not radius > 0 or per_side < 1:
        raise ScenarioError("cloud radius must be positive and per_side at least 1")
    half = radius / math.sqrt(2.0)
    offs = np.linspace(-half, half, per_side) if per_side > 1 else np.zeros(1)
    points, weights, assignment = [], [], []
    for k, (t, p) in enumerate(zip(sc.targets, sc.probs)):
        for dy in offs:
            for dx in offs:
                pt = Point(float(t[0] + dx), float(t[1] + dy))
                if not sc.grid.contains(pt) or sc.grid.nearest_index(pt) not in sc.mask:
                    raise ScenarioError(f"refined target {tuple(pt)} leaves the domain")
                points.append(pt)
                weights.append(p / per_side ** 2)
                assignment.append(k)
    return points, weights, assignment
