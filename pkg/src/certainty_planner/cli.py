"""Command-line runner: ``certainty-planner <command> --scenario ... --out DIR``.

Every command writes plain CSV/JSON files plus ``summary.json`` into the
output directory. Exit status 1 means the planning instance is
infeasible, 2 means the request or config is invalid.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from skimage.measure import find_contours

from .eikonal import DescentError, reachable_set, trace_trajectory
from .grid import DomainMask, Point, ScalarField, write_field_csv
from .random_termination import (
    InfeasibleStart,
    solve_random_termination,
    solve_random_termination_constrained,
    trace_to_motionless,
)
from .robust import (
    InfeasibleError,
    argmin_index,
    chance_constrained_policy,
    coarsening_check,
    dr_field,
    hard_constrained_waypoint,
    pareto_front,
    risk_sensitive_field,
    worst_field,
)
from .scenarios import ScenarioDef, ScenarioError, drone_stages, fine_cloud, load_scenario, solve_many
from .time_marching import discrete_stages, plan_fixed_T, plan_stage_chain

COMMANDS = ("solve", "plan-fixed", "plan-discrete", "plan-exponential", "robust-worst", "robust-risk",
            "robust-hard", "robust-chance", "robust-dr", "pareto", "coarsen-check")


class ConfigError(ValueError):
    pass


# -- output plumbing -----------------------------------------------------------

class Emitter:
    """Writes files into ``out_dir`` through a temp file and an atomic rename."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.written: list[str] = []

    def _target(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name

    def write_with(self, name: str, writer: Callable[[Path], None]) -> None:
        target = self._target(name)
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out_dir)
        os.close(fd)
        try:
            writer(Path(tmp))
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if name not in self.written:
            self.written.append(name)

    def text(self, name: str, text: str) -> None:
        self.write_with(name, lambda p: p.write_text(text))

    def field(self, name: str, fld: ScalarField) -> None:
        self.write_with(name, lambda p: write_field_csv(fld, p))

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def contour_polylines(fld: ScalarField, level: float) -> list[np.ndarray]:
    """Marching-squares polylines of ``fld`` at ``level`` in world coordinates."""
    if not math.isfinite(level):
        raise ValueError("contour levels must be finite")
    vals = fld.values
    finite = np.isfinite(vals)
    if not finite.any() or np.ptp(vals[finite]) == 0:
        return []
    img = np.where(finite, vals, np.nan)
    spec = fld.spec
    out = []
    for c in find_contours(img, level):
        xy = np.column_stack([spec.origin_x + c[:, 1] * spec.h, spec.origin_y + c[:, 0] * spec.h])
        out.append(xy)
    return out


def emit_contour_data(fld: ScalarField, levels: Sequence[float], path: str | Path) -> None:
    """CSV rows ``level,polyline,x,y``; polylines are numbered per level."""
    lines = ["level,polyline,x,y"]
    for level in levels:
        for k, xy in enumerate(contour_polylines(fld, level)):
            lines.extend(f"{float(level)!r},{k},{float(x)!r},{float(y)!r}" for x, y in xy)
    Path(path).write_text("\n".join(lines) + "\n")


def _levels(fld: ScalarField, mask: DomainMask, count: int = 16) -> list[float]:
    v = fld.values[mask.inside & np.isfinite(fld.values)]
    lo, hi = float(v.min()), float(np.quantile(v, 0.9))
    return [lo + (hi - lo) * (k + 0.5) / count for k in range(count)]


def _pt(p: Point) -> list[float]:
    return [float(p[0]), float(p[1])]


# -- argument handling ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="certainty-planner", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", default="paper_main", help="built-in name or JSON config path")
    p.add_argument("--grid", type=int, help="nodes per side")
    p.add_argument("--T", type=float, help="certainty time")
    p.add_argument("--times", type=_floats, help="discrete certainty times")
    p.add_argument("--time-probs", type=_floats, help="probabilities of the discrete times")
    p.add_argument("--lambda", dest="lam", type=float, help="exponential rate")
    p.add_argument("--beta", type=float, help="risk-sensitivity parameter")
    p.add_argument("--C", type=float, help="cost threshold")
    p.add_argument("--epsilon", type=float, help="allowed probability of exceeding C")
    p.add_argument("--delta", type=float, help="total-variation radius")
    p.add_argument("--probs", type=_floats, help="target probabilities")
    p.add_argument("--cells", type=_floats, help="cell radii for coarsen-check")
    p.add_argument("--out", default="out", help="output directory")
    return p


def _need(args, name: str, flag: str):
    v = getattr(args, name)
    if v is None:
        raise ConfigError(f"{args.command} requires {flag}")
    return v


def _positive(v: float, flag: str) -> float:
    if not (math.isfinite(v) and v > 0):
        raise ConfigError(f"{flag} must be positive and finite")
    return v


def validate(args) -> None:
    """Reject bad parameters before any solve starts."""
    if args.grid is not None and args.grid < 3:
        raise ConfigError("--grid must be at least 3")
    for name, flag in (("T", "--T"), ("lam", "--lambda"), ("beta", "--beta")):
        if getattr(args, name) is not None:
            _positive(getattr(args, name), flag)
    if args.delta is not None and not (math.isfinite(args.delta) and args.delta >= 0):
        raise ConfigError("--delta must be nonnegative")
    if args.epsilon is not None and not 0 <= args.epsilon <= 1:
        raise ConfigError("--epsilon must lie in [0, 1]")
    if args.C is not None and math.isnan(args.C):
        raise ConfigError("--C must be a number")
    if (args.times is None) != (args.time_probs is None):
        raise ConfigError("--times and --time-probs go together")
    cmd = args.command
    if cmd == "plan-exponential":
        _need(args, "lam", "--lambda")
    if cmd == "robust-risk":
        _need(args, "beta", "--beta")
    if cmd == "robust-hard":
        _need(args, "C", "--C")
    if cmd == "robust-chance":
        _need(args, "C", "--C")
        _need(args, "epsilon", "--epsilon")
    if cmd == "robust-dr":
        _need(args, "delta", "--delta")
    if args.cells is not None and any(not c > 0 for c in args.cells):
        raise ConfigError("--cells must be positive")


def _scenario(args) -> ScenarioDef:
    sc = load_scenario(args.scenario, args.grid)
    if args.probs is not None:
        sc = sc.with_probs(args.probs)
    return sc


def _horizon(args, sc: ScenarioDef) -> float:
    if args.T is not None:
        return args.T
    T = sc.param("T")
    if T is None and sc.time_model is not None and sc.time_model.kind == "fixed":
        T = sc.time_model.T
    if T is None:
        raise ConfigError(f"scenario {sc.name} has no default T; pass --T")
    return float(T)


# -- commands ------------------------------------------------------------------

def _post_paths(sc: ScenarioDef, start: Point, out: Emitter, prefix: str) -> list[str]:
    names = []
    for k, sol in enumerate(sc.target_solutions):
        name = f"{prefix}_to_target{k + 1}.csv"
        try:
            traj = trace_trajectory(sol, start)
        except (DescentError, ValueError):
            continue
        out.write_with(name, lambda p, t=traj: t.write_csv(p))
        names.append(name)
    return names


def _approach(sc: ScenarioDef, waypoint: Point, out: Emitter, name: str) -> None:
    """Path from the start to ``waypoint``: descend the start's travel time backwards."""
    try:
        traj = trace_trajectory(sc.start_solution, waypoint)
    except (DescentError, ValueError):
        return
    traj.points.reverse()
    total = traj.total_cost
    traj.cumulative_cost = [total - c for c in reversed(traj.cumulative_cost)]
    out.write_with(name, lambda p: traj.write_csv(p))


def _waypoint_summary(sc: ScenarioDef, ij: tuple[int, int], fields: dict[str, ScalarField]) -> dict:
    d = {"waypoint": _pt(sc.grid.node(*ij)), "node": list(ij)}
    for key, fld in fields.items():
        d[key] = fld[ij]
    return d


def cmd_solve(args, sc, out: Emitter) -> dict:
    q = sc.q
    qbar = worst_field(sc.ensemble)
    out.field("u_start.csv", sc.start_solution.u)
    for k, sol in enumerate(sc.target_solutions):
        out.field(f"u_target{k + 1}.csv", sol.u)
    out.field("q.csv", q)
    out.field("qbar.csv", qbar)
    out.write_with("contours_q.csv", lambda p: emit_contour_data(q, _levels(q, sc.mask), p))
    gi = argmin_index(q, sc.mask)
    return {"global_min_q": _waypoint_summary(sc, gi, {"q": q, "qbar": qbar})}


def _reach(args, sc):
    T = _horizon(args, sc)
    reach = reachable_set(sc.start_solution, T)
    return T, reach


def _emit_reach_contour(sc, T, out):
    out.write_with("contours_reachable.csv", lambda p: emit_contour_data(sc.start_solution.u, [T], p))


def cmd_plan_fixed(args, sc, out: Emitter) -> dict:
    T = _horizon(args, sc)
    plan = plan_fixed_T(sc, T)
    q = sc.q
    out.field("q.csv", q)
    _emit_reach_contour(sc, T, out)
    _approach(sc, plan.waypoint, out, "path_to_waypoint.csv")
    _post_paths(sc, plan.waypoint, out, "path_waypoint")
    return {"T": T, "waypoint": _pt(plan.waypoint), "node": list(plan.waypoint_index),
            "q_waypoint": q[plan.waypoint_index], "expected_total": plan.expected_total}


def cmd_plan_discrete(args, sc, out: Emitter) -> dict:
    if args.times is not None:
        stages = discrete_stages(sc.q, args.times, args.time_probs)
        times, probs = args.times, args.time_probs
    elif sc.param("drone_order") is not None:
        stages = drone_stages(sc)
        times, probs = [s.time for s in stages], list(sc.time_model.probs)
    elif sc.time_model is not None and sc.time_model.kind == "discrete":
        times, probs = list(sc.time_model.times), list(sc.time_model.probs)
        stages = discrete_stages(sc.q, times, probs)
    else:
        raise ConfigError("plan-discrete needs --times/--time-probs or a discrete scenario")
    plan = plan_stage_chain(sc, stages)
    lines = ["x,y"] + [f"{float(p[0])!r},{float(p[1])!r}" for p in plan.path]
    out.text("path.csv", "\n".join(lines) + "\n")
    for k, tv in enumerate(plan.stages):
        out.field(f"stage{k + 1}_start.csv", tv.initial())
    return {"times": list(times), "time_probs": list(probs),
            "waypoints": [_pt(w) for w in plan.waypoints], "value_at_start": plan.value_at_start}


def cmd_plan_exponential(args, sc, out: Emitter) -> dict:
    q = sc.q
    if args.C is not None:
        sol = solve_random_termination_constrained(q, worst_field(sc.ensemble), sc.speed, args.lam,
                                                   args.C, sc.mask, x0=sc.x0)
    else:
        sol = solve_random_termination(q, sc.speed, args.lam, sc.mask)
    traj = trace_to_motionless(sol, sc.x0)
    out.field("u_lambda.csv", sol.u_lambda)
    js, is_ = np.nonzero(sol.motionless)
    lines = ["i,j,x,y"] + [f"{i},{j},{sc.grid.node(i, j)[0]!r},{sc.grid.node(i, j)[1]!r}"
                           for j, i in zip(js, is_)]
    out.text("motionless.csv", "\n".join(lines) + "\n")
    out.write_with("path.csv", lambda p: traj.write_csv(p))
    return {"lambda": args.lam, "C": args.C, "value_at_start": sol.value_at(sc.x0),
            "terminal_point": _pt(traj.end), "motionless_count": int(sol.motionless.sum()),
            "lambda_residual": sol.max_residual}


def _argmin_command(name, fld, args, sc, out, extra=None) -> dict:
    T, reach = _reach(args, sc)
    q, qbar = sc.q, worst_field(sc.ensemble)
    ij = argmin_index(fld, reach)
    out.field(f"{name}.csv", fld)
    _emit_reach_contour(sc, T, out)
    _post_paths(sc, sc.grid.node(*ij), out, "path_waypoint")
    d = {"T": T, **_waypoint_summary(sc, ij, {"q": q, "qbar": qbar, "objective": fld})}
    d.update(extra or {})
    return d


def cmd_robust_worst(args, sc, out):
    return _argmin_command("qbar", worst_field(sc.ensemble), args, sc, out)


def cmd_robust_risk(args, sc, out):
    return _argmin_command("certainty_equivalent", risk_sensitive_field(sc.ensemble, args.beta),
                           args, sc, out, {"beta": args.beta})


def cmd_robust_dr(args, sc, out):
    return _argmin_command("q_dr", dr_field(sc.ensemble, args.delta), args, sc, out, {"delta": args.delta})


def cmd_robust_hard(args, sc, out):
    T, reach = _reach(args, sc)
    q, qbar = sc.q, worst_field(sc.ensemble)
    w = hard_constrained_waypoint(sc.ensemble, reach, args.C)
    ij = sc.grid.nearest_index(w)
    _emit_reach_contour(sc, T, out)
    out.write_with("contours_qbar_C.csv", lambda p: emit_contour_data(qbar, [args.C], p))
    _post_paths(sc, w, out, "path_waypoint")
    return {"T": T, "C": args.C, **_waypoint_summary(sc, ij, {"q": q, "qbar": qbar})}


def cmd_robust_chance(args, sc, out):
    T, reach = _reach(args, sc)
    policy = chance_constrained_policy(sc.ensemble, reach, args.C, args.epsilon)
    out.text("policy.json", policy.to_json() + "\n")
    levels = [args.C]
    for k, sol in enumerate(sc.target_solutions):
        out.write_with(f"contours_u{k + 1}_C.csv", lambda p, s=sol: emit_contour_data(s.u, levels, p))
    _emit_reach_contour(sc, T, out)
    return {"T": T, "C": args.C, "epsilon": args.epsilon, "policy": policy.to_dict()}


def cmd_pareto(args, sc, out):
    T, reach = _reach(args, sc)
    front = pareto_front(sc.ensemble, reach)
    out.write_with("pareto.csv", lambda p: front.write_csv(p, sc.grid))
    return {"T": T, "front_size": len(front),
            "worst_end": list(front.entries[0][:2]), "average_end": list(front.entries[-1][:2])}


def cmd_coarsen_check(args, sc, out):
    if sc.cost_hypotheses:
        raise ConfigError("coarsen-check needs a target ensemble, not cost hypotheses")
    T, reach = _reach(args, sc)
    f_low = float(sc.speed.values[sc.mask.inside].min())
    reports = []
    ok = True
    for radius in args.cells or [0.02, 0.035, 0.05]:
        pts, weights, assign = fine_cloud(sc, radius)
        sols = solve_many([(sc.speed, sc.cost, p) for p in pts], sc.mask)
        h_c = max(math.dist(sc.grid.node(*sc.grid.nearest_index(p)),
                            sc.grid.node(*sc.grid.nearest_index(sc.targets[a])))
                  for p, a in zip(pts, assign))
        rep = coarsening_check([s.u for s in sols], weights, assign,
                               [s.u for s in sc.target_solutions], reach, f_low, h_c)
        d = rep.to_dict()
        d["radius"] = radius
        d["fine_residual"] = max(s.max_residual for s in sols)
        reports.append(d)
        ok &= rep.passed
    out.json("coarsening.json", reports)
    return {"T": T, "f_low": f_low, "cells": reports, "passed": ok}


HANDLERS = {
    "solve": cmd_solve,
    "plan-fixed": cmd_plan_fixed,
    "plan-discrete": cmd_plan_discrete,
    "plan-exponential": cmd_plan_exponential,
    "robust-worst": cmd_robust_worst,
    "robust-risk": cmd_robust_risk,
    "robust-hard": cmd_robust_hard,
    "robust-chance": cmd_robust_chance,
    "robust-dr": cmd_robust_dr,
    "pareto": cmd_pareto,
    "coarsen-check": cmd_coarsen_check,
}


def run(argv: Sequence[str] | None = None, stderr=None) -> int:
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        validate(args)
        sc = _scenario(args)
        _ = sc.mask  # geometry errors surface as config errors here
    except ValueError as e:
        print(f"config-error: {e}", file=stderr)
        return 2
    out = Emitter(args.out)
    try:
        results = HANDLERS[args.command](args, sc, out)
    except (InfeasibleError, InfeasibleStart) as e:
        print(f"infeasible: {e}", file=stderr)
        return 1
    except (ConfigError, ScenarioError) as e:
        print(f"config-error: {e}", file=stderr)
        return 2
    summary = {
        "command": args.command,
        "scenario": sc.name,
        "grid": sc.n,
        "probs": list(sc.probs),
        "x0": _pt(sc.x0),
        "results": results,
        "max_residual": sc.max_residual,
        "solves": {"start": sc.start_solution.max_residual,
                   "targets": [s.max_residual for s in sc.target_solutions]},
        "files": sorted(out.written) + ["summary.json"],
    }
    out.json("summary.json", summary)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
