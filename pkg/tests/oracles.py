"""Independent reference computations used by the tests.

Nothing here calls the package's solvers; the oracles only share input
data (fields, masks, fixed boundary values) with the code under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numba import njit
from scipy.optimize import linprog


# -- Gauss-Seidel sweeping ----------------------------------------------------

@njit(cache=True)
def _eik_local(a, b, tau):
    lo = min(a, b)
    hi = max(a, b)
    if lo == np.inf:
        return np.inf
    if hi - lo >= tau:
        return lo + tau
    return 0.5 * (lo + hi + math.sqrt(2.0 * tau * tau - (lo - hi) ** 2))


@njit(cache=True)
def _neighbors(u, inside, i, j, nx, ny):
    a = np.inf
    b = np.inf
    if i > 0 and inside[j, i - 1]:
        a = min(a, u[j, i - 1])
    if i < nx - 1 and inside[j, i + 1]:
        a = min(a, u[j, i + 1])
    if j > 0 and inside[j - 1, i]:
        b = min(b, u[j - 1, i])
    if j < ny - 1 and inside[j + 1, i]:
        b = min(b, u[j + 1, i])
    return a, b


@njit(cache=True)
def sweep_eikonal(speed, cost, inside, fixed, fixed_vals, h, tol=1e-14, max_rounds=10000):
    """Fast sweeping (4 alternating orderings) to the discrete fixed point."""
    ny, nx = speed.shape
    u = np.full((ny, nx), np.inf)
    for j in range(ny):
        for i in range(nx):
            if fixed[j, i]:
                u[j, i] = fixed_vals[j, i]
    for _ in range(max_rounds):
        change = 0.0
        for d in range(4):
            for jj in range(ny):
                j = jj if d < 2 else ny - 1 - jj
                for ii in range(nx):
                    i = ii if d % 2 == 0 else nx - 1 - ii
                    if not inside[j, i] or fixed[j, i]:
                        continue
                    a, b = _neighbors(u, inside, i, j, nx, ny)
                    v = _eik_local(a, b, cost[j, i] * h / speed[j, i])
                    if v < u[j, i]:
                        diff = u[j, i] - v if u[j, i] < np.inf else np.inf
                        change = max(change, diff)
                        u[j, i] = v
        if change <= tol:
            break
    return u


@njit(cache=True)
def _discounted_root(a, b, q, f, K, lam, h):
    """Bisection for lam*(v - q) + (f/h)*|((v-a)+, (v-b)+)| = K, capped at q."""
    r = f / h

    def g(v):
        da = max(v - a, 0.0)
        db = max(v - b, 0.0)
        return lam * (v - q) + r * math.sqrt(da * da + db * db) - K

    if g(q) <= 0.0:
        return q
    lo = min(a, b)
    if not lo < q:
        return q
    hi = q
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return hi if abs(g(hi)) <= abs(g(lo)) else lo


@njit(cache=True)
def sweep_discounted(q, speed, cost, inside, lam, h, tol=1e-14, max_rounds=10000):
    """Capped sweeping for the randomly terminated problem, starting from u = q."""
    ny, nx = q.shape
    u = np.where(inside, q, np.inf)
    for _ in range(max_rounds):
        change = 0.0
        for d in range(4):
            for jj in range(ny):
                j = jj if d < 2 else ny - 1 - jj
                for ii in range(nx):
                    i = ii if d % 2 == 0 else nx - 1 - ii
                    if not inside[j, i]:
                        continue
                    a, b = _neighbors(u, inside, i, j, nx, ny)
                    v = _discounted_root(a, b, q[j, i], speed[j, i], cost[j, i], lam, h)
                    if v < u[j, i]:
                        change = max(change, u[j, i] - v)
                        u[j, i] = v
        if change <= tol:
            break
    return u


# -- chance-constrained LP -------------------------------------------------------

def lp_bruteforce(r: np.ndarray, q: np.ndarray, eps: float) -> float:
    """Exhaustive optimum of min sum theta q s.t. sum theta r <= eps over vertices.

    A vertex uses one node with r <= eps, or two nodes straddling eps with
    the risk constraint tight. Within one risk value only the cheapest node
    can appear in an optimum, so nodes are first reduced per risk value.
    """
    best = {}
    for ri, qi in zip(r.tolist(), q.tolist()):
        if ri not in best or qi < best[ri]:
            best[ri] = qi
    rs = np.array(sorted(best))
    qs = np.array([best[v] for v in rs])
    lo = rs <= eps
    if not lo.any():
        return math.inf
    value = qs[lo].min()
    hi = ~lo
    if hi.any():
        rl, ql = rs[lo][:, None], qs[lo][:, None]
        rh, qh = rs[hi][None, :], qs[hi][None, :]
        theta = (eps - rl) / (rh - rl)
        value = min(value, float(((1 - theta) * ql + theta * qh).min()))
    return float(value)


def lp_highs(r: np.ndarray, q: np.ndarray, eps: float) -> float:
    res = linprog(q, A_ub=r[None, :], b_ub=[eps], A_eq=np.ones((1, r.size)), b_eq=[1.0],
                  bounds=(0, None), method="highs")
    return float(res.fun) if res.status == 0 else math.inf


# -- distributionally robust maximizer ---------------------------------------------

def tv_ball_max_enumerated(p: np.ndarray, u: np.ndarray, delta: float, step: float = 1e-3) -> float:
    """Max of p~ . u over lattice perturbations of p with TV distance <= delta."""
    m = p.size
    k = int(math.floor(min(delta, 1.0) / step + 1e-9))
    offs = np.arange(-k, k + 1) * step
    best = -math.inf
    grids = np.meshgrid(*([offs] * (m - 1)), indexing="ij")
    d = np.stack([g.ravel() for g in grids]) if m > 1 else np.zeros((0, 1))
    last = -d.sum(axis=0)
    D = np.vstack([d, last[None, :]])
    P = p[:, None] + D
    ok = (P >= -1e-12).all(axis=0) & (0.5 * np.abs(D).sum(axis=0) <= delta + 1e-12)
    if ok.any():
        best = float((u @ P[:, ok]).max())
    return best


def tv_ball_max_lp(p: np.ndarray, u: np.ndarray, delta: float) -> float:
    """Exact maximum via LP in (p~, t) with t >= |p~ - p| and sum t <= 2 delta."""
    m = p.size
    c = np.concatenate([-u, np.zeros(m)])
    I = np.eye(m)
    A_ub = np.vstack([np.hstack([I, -I]), np.hstack([-I, -I]),
                      np.concatenate([np.zeros(m), np.ones(m)])[None, :]])
    b_ub = np.concatenate([p, -p, [2 * delta]])
    A_eq = np.concatenate([np.ones(m), np.zeros(m)])[None, :]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=(0, None), method="highs")
    return float(-res.fun)


def subset_sums(p) -> set[float]:
    out = set()
    for mask in itertools.product([0, 1], repeat=len(p)):
        out.add(math.fsum(pi for pi, b in zip(p, mask) if b))
    return out
