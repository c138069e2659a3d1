"""Uniform 2D grids, scalar fields sampled on them, and the shared stencils.

Arrays are stored with shape ``(ny, nx)`` so that the flattened C-order
buffer is row-major by ``j`` then ``i``; node ``(i, j)`` sits at
``(origin_x + i*h, origin_y + j*h)`` and has linear index ``j*nx + i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

INF = math.inf


class Point(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    h: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 nodes, got {self.nx}x{self.ny}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"grid spacing must be positive, got {self.h}")

    @classmethod
    def unit_square(cls, n: int = 201) -> "GridSpec":
        return cls(n, n, 1.0 / (n - 1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def x_max(self) -> float:
        return self.origin_x + (self.nx - 1) * self.h

    @property
    def y_max(self) -> float:
        return self.origin_y + (self.ny - 1) * self.h

    def node(self, i: int, j: int) -> Point:
        self.check_index(i, j)
        return Point(self.origin_x + i * self.h, self.origin_y + j * self.h)

    def check_index(self, i: int, j: int) -> None:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise IndexError(f"node ({i}, {j}) outside {self.nx}x{self.ny} grid")

    def linear_index(self, i: int, j: int) -> int:
        self.check_index(i, j)
        return j * self.nx + i

    def unravel(self, k: int) -> tuple[int, int]:
        j, i = divmod(int(k), self.nx)
        return i, j

    def node_of_linear(self, k: int) -> Point:
        return self.node(*self.unravel(k))

    def contains(self, p: Point, tol: float = 1e-12) -> bool:
        return (self.origin_x - tol <= p[0] <= self.x_max + tol
                and self.origin_y - tol <= p[1] <= self.y_max + tol)

    def nearest_index(self, p: Point) -> tuple[int, int]:
        i = int(round((p[0] - self.origin_x) / self.h))
        j = int(round((p[1] - self.origin_y) / self.h))
        return min(max(i, 0), self.nx - 1), min(max(j, 0), self.ny - 1)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinate arrays ``(X, Y)``, each of shape ``(ny, nx)``."""
        xs = self.origin_x + np.arange(self.nx) * self.h
        ys = self.origin_y + np.arange(self.ny) * self.h
        return np.meshgrid(xs, ys)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on the nodes of ``spec``; ``+inf`` marks excluded nodes."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.spec.shape:
            if v.size != self.spec.size:
                raise ValueError(f"expected {self.spec.size} values, got {v.size}")
            v = v.reshape(self.spec.shape)
        if np.isnan(v).any():
            j, i = np.argwhere(np.isnan(v))[0]
            raise ValueError(f"NaN value at node ({i}, {j})")
        object.__setattr__(self, "values", _frozen(v))

    def __getitem__(self, ij: tuple[int, int]) -> float:
        i, j = ij
        self.spec.check_index(i, j)
        return float(self.values[j, i])

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def at(self, p: Point) -> float:
        return bilinear_sample(self, p)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.spec, values)

    def masked(self, mask: "DomainMask") -> "ScalarField":
        """Copy with every node outside ``mask`` set to ``+inf``."""
        return ScalarField(self.spec, np.where(mask.inside, self.values, INF))


@dataclass(frozen=True, eq=False)
class DomainMask:
    spec: GridSpec
    inside: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.inside, dtype=bool)
        if m.shape != self.spec.shape:
            m = m.reshape(self.spec.shape)
        if not m.any():
            raise ValueError("domain mask has no inside nodes")
        object.__setattr__(self, "inside", _frozen(m))

    def __contains__(self, ij) -> bool:
        i, j = ij
        return bool(0 <= i < self.spec.nx and 0 <= j < self.spec.ny and self.inside[j, i])

    def __and__(self, other: "DomainMask") -> "DomainMask":
        return DomainMask(self.spec, self.inside & other.inside)

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    @classmethod
    def full(cls, spec: GridSpec) -> "DomainMask":
        return cls(spec, np.ones(spec.shape, dtype=bool))


Rectangle = tuple[float, float, float, float]  # (x_lo, x_hi, y_lo, y_hi)


def rectangle_mask(spec: GridSpec, obstacles: Iterable[Rectangle] = ()) -> DomainMask:
    """Mask of the grid minus the open interiors of axis-aligned obstacles.

    Nodes on an obstacle's edge stay inside, so paths may run along it.
    """
    X, Y = spec.coordinates()
    inside = np.ones(spec.shape, dtype=bool)
    eps = 1e-9 * spec.h
    for x_lo, x_hi, y_lo, y_hi in obstacles:
        inside &= ~((X > x_lo + eps) & (X < x_hi - eps) & (Y > y_lo + eps) & (Y < y_hi - eps))
    return DomainMask(spec, inside)


def build_field(spec: GridSpec, formula: Callable, mask: DomainMask | None = None) -> ScalarField:
    """Evaluate ``formula(x, y)`` on every node.

    ``formula`` receives the coordinate arrays and may be a numpy ufunc
    expression or return a scalar. Nodes outside ``mask`` are set to ``+inf``.
    """
    X, Y = spec.coordinates()
    with np.errstate(all="ignore"):
        v = np.broadcast_to(np.asarray(formula(X, Y), dtype=float), spec.shape).copy()
    if mask is not None:
        v[~mask.inside] = INF
    if np.isnan(v).any():
        j, i = np.argwhere(np.isnan(v))[0]
        raise ValueError(f"formula returned NaN at node ({i}, {j})")
    return ScalarField(spec, v)


def constant_field(spec: GridSpec, value: float, mask: DomainMask | None = None) -> ScalarField:
    return build_field(spec, lambda x, y: value, mask)


def _neighbor(values: np.ndarray, inside: np.ndarray | None, i: int, j: int) -> float:
    ny, nx = values.shape
    if not (0 <= i < nx and 0 <= j < ny):
        return INF
    if inside is not None and not inside[j, i]:
        return INF
    return float(values[j, i])


def upwind_gradient_magnitude(u: ScalarField, i: int, j: int,
                              mask: DomainMask | None = None) -> float:
    """First-order upwind |grad u| at node (i, j).

    Each axis contributes ``max(D-, -D+, 0)``; missing or masked-out
    neighbors count as ``+inf`` and therefore never win the max.
    """
    u.spec.check_index(i, j)
    inside = None if mask is None else mask.inside
    v = float(u.values[j, i])
    if not math.isfinite(v):
        return INF
    h = u.spec.h
    ax = max(v - min(_neighbor(u.values, inside, i - 1, j), _neighbor(u.values, inside, i + 1, j)), 0.0) / h
    ay = max(v - min(_neighbor(u.values, inside, i, j - 1), _neighbor(u.values, inside, i, j + 1)), 0.0) / h
    return math.hypot(ax, ay)


def neighbor_minima(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smaller of the two x-neighbors and of the two y-neighbors, ``inf``-padded."""
    p = np.pad(values, 1, constant_values=INF)
    mx = np.minimum(p[1:-1, :-2], p[1:-1, 2:])
    my = np.minimum(p[:-2, 1:-1], p[2:, 1:-1])
    return mx, my


def upwind_gradient_array(values: np.ndarray, h: float) -> np.ndarray:
    """Vectorized upwind |grad U| over a whole array; ``inf`` where U is ``inf``."""
    mx, my = neighbor_minima(values)
    finite = np.isfinite(values)
    with np.errstate(invalid="ignore"):
        ax = np.where(finite, np.maximum(values - mx, 0.0), 0.0)
        ay = np.where(finite, np.maximum(values - my, 0.0), 0.0)
    g = np.hypot(ax, ay) / h
    g[~finite] = INF
    return g


def upwind_descent_gradient(values: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Signed upwind gradient at every node, zero at non-finite nodes.

    Per axis the neighbor realizing the upwind max is used, so ``-grad``
    points toward the smaller neighbor, i.e. along the characteristic.
    """
    p = np.pad(values, 1, constant_values=INF)
    c = p[1:-1, 1:-1]
    finite = np.isfinite(c)

    def axis(lo, hi):
        with np.errstate(invalid="ignore"):
            d_back = np.where(np.isfinite(lo) & finite, c - lo, -INF)   # D- times h
            d_fwd = np.where(np.isfinite(hi) & finite, c - hi, -INF)    # -D+ times h
        g = np.zeros_like(c)
        use_back = (d_back >= d_fwd) & (d_back > 0)
        use_fwd = ~use_back & (d_fwd > 0)
        g[use_back] = d_back[use_back] / h
        g[use_fwd] = -d_fwd[use_fwd] / h
        return g

    gx = axis(p[1:-1, :-2], p[1:-1, 2:])
    gy = axis(p[:-2, 1:-1], p[2:, 1:-1])
    return gx, gy


def _cell(spec: GridSpec, p: Point) -> tuple[int, int, float, float]:
    if not spec.contains(p):
        raise ValueError(f"point {tuple(p)} outside grid bounding box")
    fx = (p[0] - spec.origin_x) / spec.h
    fy = (p[1] - spec.origin_y) / spec.h
    i0 = min(max(int(math.floor(fx)), 0), spec.nx - 2)
    j0 = min(max(int(math.floor(fy)), 0), spec.ny - 2)
    tx = min(max(fx - i0, 0.0), 1.0)
    ty = min(max(fy - j0, 0.0), 1.0)
    return i0, j0, tx, ty


def bilinear_sample(field: ScalarField, p: Point) -> float:
    """Bilinear interpolation; a ``+inf`` corner with nonzero weight gives ``+inf``."""
    i0, j0, tx, ty = _cell(field.spec, p)
    v = field.values
    total = 0.0
    for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                      (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        if w == 0.0:
            continue
        c = v[j0 + dj, i0 + di]
        if c == INF:
            return INF
        total += w * c
    return float(total)


def bilinear_many(values: np.ndarray, spec: GridSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized bilinear interpolation at points inside the bounding box.

    Same convention as :func:`bilinear_sample`: any ``+inf`` corner with
    nonzero weight makes the result ``+inf``.
    """
    fx = np.clip((np.asarray(xs) - spec.origin_x) / spec.h, 0, spec.nx - 1)
    fy = np.clip((np.asarray(ys) - spec.origin_y) / spec.h, 0, spec.ny - 1)
    i0 = np.minimum(np.floor(fx).astype(np.int64), spec.nx - 2)
    j0 = np.minimum(np.floor(fy).astype(np.int64), spec.ny - 2)
    tx, ty = fx - i0, fy - j0
    out = np.zeros(fx.shape)
    for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                      (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        c = values[j0 + dj, i0 + di]
        out += np.where(w > 0, w * np.where(np.isfinite(c), c, 0.0), 0.0)
        out[(w > 0) & ~np.isfinite(c)] = INF
    return out


def masked_bilinear(values: np.ndarray, usable: np.ndarray, spec: GridSpec, p: Point) -> float | None:
    """Bilinear interpolation over usable corners only, weights renormalized.

    Returns ``None`` when no usable corner carries weight.
    """
    i0, j0, tx, ty = _cell(spec, p)
    total = wsum = 0.0
    for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                      (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        if w > 0.0 and usable[j0 + dj, i0 + di]:
            total += w * values[j0 + dj, i0 + di]
            wsum += w
    if wsum <= 1e-12:
        return None
    return total / wsum


# -- CSV serialization -------------------------------------------------------

def _fmt(v: float) -> str:
    return "inf" if v == INF else ("-inf" if v == -INF else repr(float(v)))


def write_field_csv(field: ScalarField, path: str | Path, time: float | None = None) -> None:
    """Write a field as CSV: one row per ``j`` ascending, ``inf`` for +infinity."""
    s = field.spec
    header = f"# nx,ny,h,origin_x,origin_y\n# {s.nx},{s.ny},{s.h!r},{s.origin_x!r},{s.origin_y!r}\n"
    if time is not None:
        header += f"# t={time!r}\n"
    rows = (",".join(_fmt(v) for v in row) for row in field.values)
    Path(path).write_text(header + "\n".join(rows) + "\n")


def read_field_csv(path: str | Path) -> ScalarField:
    lines = Path(path).read_text().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    nx, ny, h, ox, oy = comments[1].lstrip("# ").split(",")
    spec = GridSpec(int(nx), int(ny), float(h), float(ox), float(oy))
    data = [[float(tok) for tok in ln.split(",")] for ln in lines if ln and not ln.startswith("#")]
    return ScalarField(spec, np.array(data))


def field_stack(fields: Sequence[ScalarField]) -> np.ndarray:
    return np.stack([f.values for f in fields])
