"""Waypoint selection criteria over a solved ensemble of target value fields.

Everything here is a pure function of the per-target fields ``u_i``;
the reachable set ``Omega_T(x0)`` is passed in as a mask.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import INF, DomainMask, GridSpec, Point, ScalarField

PROB_TOL = 1e-9
R_MERGE_TOL = 1e-12


class InfeasibleError(ValueError):
    """The constrained planning problem has no admissible waypoint."""


@dataclass(frozen=True, eq=False)
class TargetEnsemble:
    targets: tuple[Point, ...]
    probs: tuple[float, ...]
    value_fields: tuple[ScalarField, ...]

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(Point(*t) for t in self.targets))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        object.__setattr__(self, "value_fields", tuple(self.value_fields))
        validate_probs(self.probs)
        if not (len(self.targets) == len(self.probs) == len(self.value_fields)):
            raise ValueError("targets, probs and value_fields must have equal length")

    @property
    def spec(self) -> GridSpec:
        return self.value_fields[0].spec

    @property
    def m(self) -> int:
        return len(self.probs)

    @property
    def stack(self) -> np.ndarray:
        return np.stack([f.values for f in self.value_fields])

    @property
    def p(self) -> np.ndarray:
        return np.array(self.probs)

    def with_probs(self, probs: Sequence[float]) -> "TargetEnsemble":
        return TargetEnsemble(self.targets, tuple(probs), self.value_fields)


def validate_probs(probs: Sequence[float]) -> None:
    if len(probs) == 0:
        raise ValueError("empty probability vector")
    if any(not p > 0 for p in probs):
        raise ValueError("every target probability must be positive")
    if abs(math.fsum(probs) - 1.0) > PROB_TOL:
        raise ValueError(f"probabilities sum to {math.fsum(probs)}, not 1")


def _weighted_sum(U: np.ndarray, w: np.ndarray) -> np.ndarray:
    finite = np.isfinite(U).all(axis=0)
    out = np.tensordot(w, np.where(np.isfinite(U), U, 0.0), axes=1)
    out[~finite] = INF
    return out


def expected_field(ensemble: TargetEnsemble) -> ScalarField:
    return ScalarField(ensemble.spec, _weighted_sum(ensemble.stack, ensemble.p))


def worst_field(ensemble: TargetEnsemble) -> ScalarField:
    return ScalarField(ensemble.spec, ensemble.stack.max(axis=0))


def risk_sensitive_field(ensemble: TargetEnsemble, beta: float) -> ScalarField:
    """Certainty equivalent log(sum p_i exp(beta u_i)) / beta, evaluated with a max shift."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    U = ensemble.stack
    top = U.max(axis=0)
    finite = np.isfinite(top)
    safe_top = np.where(finite, top, 0.0)
    shifted = np.where(finite, U - safe_top, 0.0)
    s = np.tensordot(ensemble.p, np.exp(beta * shifted), axes=1)
    ce = safe_top + np.log(s) / beta
    ce[~finite] = INF
    return ScalarField(ensemble.spec, ce)


def argmin_index(fld: ScalarField, reachable: DomainMask) -> tuple[int, int]:
    vals = np.where(reachable.inside, fld.values, INF).ravel()
    k = int(np.argmin(vals))
    if not math.isfinite(vals[k]):
        raise InfeasibleError("no finite field value on the mask")
    return fld.spec.unravel(k)


def waypoint_argmin(fld: ScalarField, reachable: DomainMask) -> Point:
    """Minimizing node over the mask (ties: lowest linear index)."""
    return fld.spec.node(*argmin_index(fld, reachable))


def hard_constrained_waypoint(ensemble: TargetEnsemble, reachable: DomainMask, C: float) -> Point:
    """Minimize the expectation over reachable nodes whose worst case is at most ``C``."""
    q = expected_field(ensemble)
    qbar = worst_field(ensemble)
    keep = reachable.inside & (qbar.values <= C)
    if not keep.any():
        raise InfeasibleError(f"no reachable node with worst-case cost <= {C}")
    return waypoint_argmin(q, DomainMask(q.spec, keep))


# -- Pareto front --------------------------------------------------------------

@dataclass
class ParetoFront:
    """Non-dominated ``(worst, avg, index)`` entries sorted by worst ascending."""

    entries: list[tuple[float, float, int]]

    @classmethod
    def from_pairs(cls, pairs) -> "ParetoFront":
        ordered = sorted(pairs, key=lambda e: (e[0], e[1], e[2]))
        kept = []
        best = INF
        for w, a, k in ordered:
            if a < best:
                kept.append((float(w), float(a), int(k)))
                best = a
        return cls(kept)

    def __len__(self) -> int:
        return len(self.entries)

    def dominates_or_equals(self, worst: float, avg: float) -> bool:
        return any(w <= worst and a <= avg for w, a, _ in self.entries)

    def write_csv(self, path, spec: GridSpec | None = None) -> None:
        lines = ["worst,avg,i,j"]
        for w, a, k in self.entries:
            i, j = spec.unravel(k) if spec is not None else (k, -1)
            lines.append(f"{w!r},{a!r},{i},{j}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def pareto_front(ensemble: TargetEnsemble, reachable: DomainMask) -> ParetoFront:
    """(worst, expected) Pareto front over every reachable grid node."""
    q = expected_field(ensemble).values.ravel()
    qbar = worst_field(ensemble).values.ravel()
    idx = np.flatnonzero(reachable.inside.ravel() & np.isfinite(q))
    order = np.lexsort((idx, q[idx], qbar[idx]))
    kept = []
    best = INF
    for k in idx[order]:
        if q[k] < best:
            kept.append((float(qbar[k]), float(q[k]), int(k)))
            best = q[k]
    return ParetoFront(kept)


# -- chance constraints --------------------------------------------------------

def risk_field(ensemble: TargetEnsemble, C: float, reachable: DomainMask | None = None) -> ScalarField:
    """Probability that the post-certainty cost exceeds ``C``; ``+inf`` off the mask."""
    if not math.isfinite(C):
        raise ValueError("C must be finite")
    U = ensemble.stack
    bits = _exceed_bits(U, C)
    table = subset_sum_table(ensemble.probs)
    r = table[bits]
    if reachable is not None:
        r = np.where(reachable.inside, r, INF)
    return ScalarField(ensemble.spec, r)


def _exceed_bits(U: np.ndarray, C: float) -> np.ndarray:
    bits = np.zeros(U.shape[1:], dtype=np.int64)
    for i in range(U.shape[0]):
        bits |= (U[i] > C).astype(np.int64) << i
    return bits


def subset_sum_table(probs: Sequence[float]) -> np.ndarray:
    """Correctly rounded sum of ``probs`` over every subset, indexed by bitmask."""
    m = len(probs)
    if m > 24:
        raise ValueError("too many targets for a subset table")
    return np.array([math.fsum(p for i, p in enumerate(probs) if mask >> i & 1)
                     for mask in range(1 << m)])


def sorted_subset_sums(probs: Sequence[float]) -> list[tuple[float, int]]:
    """All ``2^m`` subset sums with their bitmasks, in ascending order, by merging.

    Each target doubles the list: the old sums and the old sums plus its
    probability are both already sorted, so one linear merge keeps order.
    """
    table = subset_sum_table(probs)
    order = sorted(range(len(probs)), key=lambda i: probs[i])
    out = [0]
    for i in order:
        bit = 1 << i
        shifted = [mask | bit for mask in out]
        merged = []
        a = b = 0
        while a < len(out) and b < len(shifted):
            if table[out[a]] <= table[shifted[b]]:
                merged.append(out[a])
                a += 1
            else:
                merged.append(shifted[b])
                b += 1
        merged.extend(out[a:])
        merged.extend(shifted[b:])
        out = merged
    return [(float(table[mk]), mk) for mk in out]


@dataclass
class HullChain:
    """Lower-left convex chain of the (risk, expectation) cloud, risk ascending."""

    vertices: list[tuple[float, float, int]]

    @property
    def risks(self) -> list[float]:
        return [v[0] for v in self.vertices]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def lower_left_chain(points: Sequence[tuple[float, float, int]]) -> HullChain:
    """Monotone-chain lower hull of risk-sorted points, cut at the lowest expectation.

    ``points`` must be sorted by risk with distinct risks.
    """
    chain: list[tuple[float, float, int]] = []
    for p in points:
        while len(chain) >= 2 and _cross(chain[-2], chain[-1], p) <= 0:
            chain.pop()
        chain.append(p)
    qmin = min(v[1] for v in chain)
    cut = next(k for k, v in enumerate(chain) if v[1] == qmin)
    return HullChain(chain[:cut + 1])


def risk_groups(ensemble: TargetEnsemble, C: float, reachable: DomainMask):
    """Per-risk-value minimum of the expectation: ``[(r, q_min, node), ...]`` by r."""
    q = expected_field(ensemble).values.ravel()
    U = ensemble.stack.reshape(ensemble.m, -1)
    idx = np.flatnonzero(reachable.inside.ravel() & np.isfinite(q))
    if idx.size == 0:
        raise InfeasibleError("empty reachable set")
    bits = _exceed_bits(U[:, idx], C)
    # best node per bitmask group
    order = np.lexsort((idx, q[idx], bits))
    first = np.ones(order.size, dtype=bool)
    first[1:] = bits[order][1:] != bits[order][:-1]
    group_best = {int(bits[o]): int(idx[o]) for o in order[first]}
    if ensemble.m <= 20:
        ordered_masks = [(r, mk) for r, mk in sorted_subset_sums(ensemble.probs) if mk in group_best]
    else:
        ordered_masks = sorted((math.fsum(p for i, p in enumerate(ensemble.probs) if mk >> i & 1), mk)
                               for mk in group_best)
    groups: list[tuple[float, float, int]] = []
    for r, mk in ordered_masks:
        k = group_best[mk]
        if groups and r - groups[-1][0] <= R_MERGE_TOL:
            r0, q0, k0 = groups[-1]
            if (q[k], k) < (q0, k0):
                groups[-1] = (r0, float(q[k]), k)
            continue
        groups.append((r, float(q[k]), k))
    return groups


@dataclass
class WaypointPolicy:
    """Finite mixed strategy over waypoints."""

    atoms: list[tuple[Point, float]]
    nodes: list[int] = field(default_factory=list)
    objective: float = math.nan
    risk: float = math.nan

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("policy needs at least one atom")
        if any(p <= 0 for _, p in self.atoms):
            raise ValueError("atom probabilities must be positive")
        if abs(math.fsum(p for _, p in self.atoms) - 1.0) > 1e-12:
            raise ValueError("atom probabilities must sum to 1")

    @property
    def deterministic(self) -> bool:
        return len(self.atoms) == 1

    def to_dict(self) -> dict:
        return {
            "atoms": [{"x": float(p[0]), "y": float(p[1]), "probability": float(w)} for p, w in self.atoms],
            "objective": float(self.objective),
            "risk": float(self.risk),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def chance_constrained_policy(ensemble: TargetEnsemble, reachable: DomainMask, C: float,
                              epsilon: float) -> WaypointPolicy:
    """Cheapest mixed waypoint strategy whose risk of exceeding ``C`` is at most ``epsilon``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    spec = ensemble.spec
    chain = lower_left_chain(risk_groups(ensemble, C, reachable))
    verts = chain.vertices
    if epsilon < verts[0][0]:
        raise InfeasibleError(f"epsilon={epsilon} below the minimal attainable risk {verts[0][0]}")

    def atom(v, w):
        return (spec.node_of_linear(v[2]), w)

    if epsilon >= verts[-1][0]:
        v = verts[-1]
        return WaypointPolicy([atom(v, 1.0)], [v[2]], v[1], v[0])
    k = bisect.bisect_right(chain.risks, epsilon) - 1
    left, right = verts[k], verts[k + 1]
    if epsilon == left[0]:
        return WaypointPolicy([atom(left, 1.0)], [left[2]], left[1], left[0])
    theta = (epsilon - left[0]) / (right[0] - left[0])
    objective = (1.0 - theta) * left[1] + theta * right[1]
    return WaypointPolicy([atom(left, 1.0 - theta), atom(right, theta)],
                          [left[2], right[2]], objective, epsilon)


# -- distributional robustness ------------------------------------------------

def tv_distance(p: Sequence[float], p2: Sequence[float]) -> float:
    """Total variation distance ``1 - sum min(p_i, p2_i)``."""
    if len(p) != len(p2):
        raise ValueError("distributions have different lengths")
    return max(0.0, 1.0 - math.fsum(min(a, b) for a, b in zip(p, p2)))


def dr_worst_distribution(probs: Sequence[float], u: Sequence[float], delta: float) -> np.ndarray:
    """Maximizer of sum p~_i u_i over the TV ball of radius ``delta``.

    Mass ``delta`` moves onto the costliest target, taken from the cheapest
    ones first. Ties in ``u`` are ordered by target index.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    p = np.asarray(probs, dtype=float)
    order = np.argsort(np.asarray(u, dtype=float), kind="stable")
    out = p.copy()
    hard = order[-1]
    out[hard] = min(1.0, p[hard] + delta)
    if out[hard] == 1.0:
        out[:] = 0.0
        out[hard] = 1.0
        return out
    budget = out[hard] - p[hard]
    for i in order[:-1]:
        if budget <= 0:
            break
        take = min(out[i], budget)
        out[i] -= take
        budget -= take
    return out


def dr_field(ensemble: TargetEnsemble, delta: float) -> ScalarField:
    """Worst expectation over the TV ball, node by node."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    U = ensemble.stack
    m = U.shape[0]
    finite = np.isfinite(U).all(axis=0)
    Us = np.where(finite, U, 0.0)
    order = np.argsort(Us, axis=0, kind="stable")
    us = np.take_along_axis(Us, order, axis=0)
    ps = ensemble.p[order]
    hard = ps[-1]
    new_hard = np.minimum(1.0, hard + delta)
    saturated = new_hard >= 1.0
    budget = new_hard - hard
    for k in range(m - 1):
        take = np.minimum(ps[k], budget)
        ps[k] = ps[k] - take
        budget = budget - take
    ps[-1] = new_hard
    ps[:-1, saturated] = 0.0
    out = (ps * us).sum(axis=0)
    out[~finite] = INF
    return ScalarField(ensemble.spec, out)


# -- target-set coarsening ----------------------------------------------------

@dataclass
class CoarseningReport:
    max_gap: float
    gap_bound: float
    suboptimality: float
    suboptimality_bound: float
    slack: float
    waypoint: Point
    fine_waypoint: Point
    h_coarse: float
    f_low: float

    @property
    def gap_ok(self) -> bool:
        return self.max_gap <= self.gap_bound + self.slack

    @property
    def suboptimality_ok(self) -> bool:
        return self.suboptimality <= self.suboptimality_bound + self.slack

    @property
    def passed(self) -> bool:
        return self.gap_ok and self.suboptimality_ok

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("max_gap", "gap_bound", "suboptimality",
                                           "suboptimality_bound", "slack", "h_coarse", "f_low")}
        d["waypoint"] = list(self.waypoint)
        d["fine_waypoint"] = list(self.fine_waypoint)
        d["passed"] = self.passed
        return d


def coarsening_check(fine_fields: Sequence[ScalarField], fine_weights: Sequence[float],
                     assignment: Sequence[int | None], coarse_fields: Sequence[ScalarField],
                     reachable: DomainMask, f_low: float, h_coarse: float) -> CoarseningReport:
    """Compare the fine-cloud expectation with its coarsened surrogate on the reachable set.

    ``assignment[k]`` names the coarse cell of fine target ``k``; coarse
    probabilities are the summed weights of their cells.
    """
    if any(a is None for a in assignment) or len(assignment) != len(fine_fields):
        raise ValueError("every fine target must be assigned to a coarse cell")
    if not f_low > 0:
        raise ValueError("speed lower bound must be positive")
    w = np.asarray(fine_weights, dtype=float)
    w = w / w.sum()
    m = len(coarse_fields)
    p = np.zeros(m)
    for k, a in enumerate(assignment):
        if not 0 <= a < m:
            raise ValueError(f"fine target {k} assigned to unknown cell {a}")
        p[a] += w[k]
    spec = coarse_fields[0].spec
    xi = _weighted_sum(np.stack([f.values for f in fine_fields]), w)
    q = _weighted_sum(np.stack([f.values for f in coarse_fields]), p)
    ok = reachable.inside & np.isfinite(xi) & np.isfinite(q)
    gap = float(np.max(np.abs(xi[ok] - q[ok])))
    s = argmin_index(ScalarField(spec, q), reachable)
    s_mu = argmin_index(ScalarField(spec, xi), reachable)
    subopt = float(xi[s[1], s[0]] - xi[s_mu[1], s_mu[0]])
    return CoarseningReport(gap, h_coarse / f_low, subopt, 2 * h_coarse / f_low, 4 * spec.h,
                            spec.node(*s), spec.node(*s_mu), h_coarse, f_low)
