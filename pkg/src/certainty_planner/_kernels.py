"""Compiled inner loops for the marching solvers.

All arrays are flattened C-order grids (linear index ``j*nx + i``).
Heap ordering is lexicographic on ``(value, linear index)`` so runs are
deterministic under ties.
"""

import math

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True, inline="always")
def _less(key, a, b):
    ka = key[a]
    kb = key[b]
    return ka < kb or (ka == kb and a < b)


@njit(cache=True)
def _sift_up(heap, pos, key, k):
    p = pos[k]
    while p > 0:
        parent = (p - 1) >> 1
        other = heap[parent]
        if _less(key, k, other):
            heap[p] = other
            pos[other] = p
            p = parent
        else:
            break
    heap[p] = k
    pos[k] = p


@njit(cache=True)
def _sift_down(heap, pos, key, size, k):
    p = pos[k]
    while True:
        child = 2 * p + 1
        if child >= size:
            break
        if child + 1 < size and _less(key, heap[child + 1], heap[child]):
            child += 1
        other = heap[child]
        if _less(key, other, k):
            heap[p] = other
            pos[other] = p
            p = child
        else:
            break
    heap[p] = k
    pos[k] = p


@njit(cache=True)
def _push_or_decrease(heap, pos, key, size, k):
    if pos[k] < 0:
        heap[size] = k
        pos[k] = size
        size += 1
    _sift_up(heap, pos, key, k)
    return size


@njit(cache=True)
def _pop(heap, pos, key, size):
    top = heap[0]
    pos[top] = -1
    size -= 1
    if size > 0:
        last = heap[size]
        heap[0] = last
        pos[last] = 0
        _sift_down(heap, pos, key, size, last)
    return top, size


@njit(cache=True)
def eikonal_update(a, b, tau):
    """Smallest v with ((v-a)+)^2 + ((v-b)+)^2 = tau^2 for axis minima a, b."""
    if a > b:
        a, b = b, a
    if a == INF:
        return INF
    if b - a >= tau:
        return a + tau
    return 0.5 * (a + b + math.sqrt(2.0 * tau * tau - (a - b) * (a - b)))


@njit(cache=True)
def discounted_update(a, b, q, f, K, lam, h):
    """Root of lam*(v - q) + f*|grad|_upwind(v) = K, capped at q.

    ``a``, ``b`` are the axis-wise neighbor minima. G(v) is strictly
    increasing, so the active-neighbor set is found by trying 0, 1, 2.
    """
    if a > b:
        a, b = b, a
    c = K + lam * q
    v = c / lam
    if v > a:
        r = f / h
        v = (c + r * a) / (lam + r)
        if v > b:
            # w = v - b > 0 solves (2F - lam^2) w^2 + 2(F d + e lam) w + (F d^2 - e^2) = 0
            F = r * r
            d = b - a
            e = c - lam * b
            A = 2.0 * F - lam * lam
            B = 2.0 * (F * d + e * lam)
            C = F * d * d - e * e
            disc = B * B - 4.0 * A * C
            if disc < 0.0:
                disc = 0.0
            w = -2.0 * C / (B + math.sqrt(disc))
            v = b + w
    if v > q:
        v = q
    return v


@njit(cache=True)
def _axis_minima(u, accepted, k, nx, ny):
    i = k % nx
    j = k // nx
    a = INF
    b = INF
    if i > 0 and accepted[k - 1] and u[k - 1] < a:
        a = u[k - 1]
    if i < nx - 1 and accepted[k + 1] and u[k + 1] < a:
        a = u[k + 1]
    if j > 0 and accepted[k - nx] and u[k - nx] < b:
        b = u[k - nx]
    if j < ny - 1 and accepted[k + nx] and u[k + nx] < b:
        b = u[k + nx]
    return a, b


@njit(cache=True, nogil=True)
def fast_marching(speed, cost, inside, sources, source_values, nx, ny, h):
    """Fast Marching for |grad u| f = K with u fixed to ``source_values`` on ``sources``.

    Source nodes are never updated. Returns the value array and the
    acceptance order.
    """
    n = nx * ny
    u = np.full(n, INF)
    accepted = np.zeros(n, dtype=np.bool_)
    heap = np.empty(n, dtype=np.int64)
    pos = np.full(n, -1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    fixed = np.zeros(n, dtype=np.bool_)
    size = 0
    for t in range(sources.size):
        s = sources[t]
        if not fixed[s]:
            fixed[s] = True
            u[s] = source_values[t]
            size = _push_or_decrease(heap, pos, u, size, s)
        elif source_values[t] < u[s]:
            u[s] = source_values[t]
            _sift_up(heap, pos, u, s)
    count = 0
    while size > 0:
        k, size = _pop(heap, pos, u, size)
        accepted[k] = True
        order[count] = k
        count += 1
        i = k % nx
        j = k // nx
        for t in range(4):
            if t == 0:
                if i == 0:
                    continue
                m = k - 1
            elif t == 1:
                if i == nx - 1:
                    continue
                m = k + 1
            elif t == 2:
                if j == 0:
                    continue
                m = k - nx
            else:
                if j == ny - 1:
                    continue
                m = k + nx
            if accepted[m] or fixed[m] or not inside[m]:
                continue
            a, b = _axis_minima(u, accepted, m, nx, ny)
            v = eikonal_update(a, b, cost[m] * h / speed[m])
            if v < u[m]:
                u[m] = v
                size = _push_or_decrease(heap, pos, u, size, m)
    return u, order[:count]


@njit(cache=True, nogil=True)
def discounted_marching(q, speed, cost, inside, lam, nx, ny, h):
    """Capped marching for lam*(u - q) + f|grad u| = K with u <= q.

    Every inside node starts tentative at its no-motion value q, so the
    heap initially holds the whole domain.
    """
    n = nx * ny
    u = np.full(n, INF)
    accepted = np.zeros(n, dtype=np.bool_)
    heap = np.empty(n, dtype=np.int64)
    pos = np.full(n, -1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    size = 0
    for k in range(n):
        if inside[k]:
            u[k] = q[k]
            size = _push_or_decrease(heap, pos, u, size, k)
    count = 0
    while size > 0:
        k, size = _pop(heap, pos, u, size)
        accepted[k] = True
        order[count] = k
        count += 1
        i = k % nx
        j = k // nx
        for t in range(4):
            if t == 0:
                if i == 0:
                    continue
                m = k - 1
            elif t == 1:
                if i == nx - 1:
                    continue
                m = k + 1
            elif t == 2:
                if j == 0:
                    continue
                m = k - nx
            else:
                if j == ny - 1:
                    continue
                m = k + nx
            if accepted[m] or not inside[m]:
                continue
            a, b = _axis_minima(u, accepted, m, nx, ny)
            v = discounted_update(a, b, q[m], speed[m], cost[m], lam, h)
            if v < u[m]:
                u[m] = v
                _sift_up(heap, pos, u, m)
    return u, order[:count]


@njit(cache=True)
def _all_minima(u, inside, k, nx, ny):
    i = k % nx
    j = k // nx
    a = INF
    b = INF
    if i > 0 and inside[k - 1]:
        a = min(a, u[k - 1])
    if i < nx - 1 and inside[k + 1]:
        a = min(a, u[k + 1])
    if j > 0 and inside[k - nx]:
        b = min(b, u[k - nx])
    if j < ny - 1 and inside[k + nx]:
        b = min(b, u[k + nx])
    return a, b


@njit(cache=True)
def eikonal_residual(u, speed, cost, inside, is_source, nx, ny, h):
    """Max relative gap between u and its own local update over finite non-source nodes."""
    worst = 0.0
    for k in range(nx * ny):
        if not inside[k] or is_source[k] or u[k] == INF:
            continue
        a, b = _all_minima(u, inside, k, nx, ny)
        v = eikonal_update(a, b, cost[k] * h / speed[k])
        r = abs(v - u[k]) / max(1.0, abs(u[k]))
        if r > worst:
            worst = r
    return worst


@njit(cache=True)
def discounted_residual(u, q, speed, cost, inside, lam, nx, ny, h, skip):
    worst = 0.0
    for k in range(nx * ny):
        if not inside[k] or skip[k]:
            continue
        a, b = _all_minima(u, inside, k, nx, ny)
        v = discounted_update(a, b, q[k], speed[k], cost[k], lam, h)
        r = abs(v - u[k]) / max(1.0, abs(u[k]))
        if r > worst:
            worst = r
    return worst
