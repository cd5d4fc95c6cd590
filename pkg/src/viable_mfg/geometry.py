"""Domains described by oriented distance functions.

A domain is the intersection of one or more smooth pieces; each piece carries
its own distance ``d_i`` (positive inside), gradient and Hessian.  The overall
distance is ``min_i d_i`` with derivatives taken from the active piece.  For
intersections (rectangles) the product barrier ``psi = prod_i phi(d_i)`` gives
a C^2 replacement for the non-smooth minimum.

All evaluators are vectorised: points are arrays of shape ``(n, N)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BlendInfeasible, EmptyDomain, GeometryError

Array = np.ndarray


def as_points(x, dim: int | None = None) -> Array:
    """Coerce ``x`` to a float array of shape (n, N)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        if dim is None or dim == 1:
            x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
        else:
            x = x.reshape(1, -1)
    if dim is not None and x.shape[1] != dim:
        raise GeometryError(f"expected points of dimension {dim}, got {x.shape[1]}")
    return x


@dataclass(frozen=True)
class SmoothPiece:
    """One C^2 piece ``{d_i > 0}`` of a domain."""

    distance: Callable[[Array], Array]
    gradient: Callable[[Array], Array]
    hessian: Callable[[Array], Array]
    tube_width: float
    name: str = ""
    # boundary parametrisation used by the samplers: (n_tangential) -> (points, inward normals)
    boundary_sampler: Callable[[int], tuple[Array, Array]] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class DomainSpec:
    pieces: tuple[SmoothPiece, ...]
    bounding_box: tuple[Array, Array]
    kind: str = "smooth"

    @property
    def dim(self) -> int:
        return len(self.bounding_box[0])

    def piece_distances(self, x) -> Array:
        """Distances to every piece, shape (n, n_pieces)."""
        x = as_points(x, self.dim)
        return np.stack([p.distance(x) for p in self.pieces], axis=1)

    def distance(self, x) -> Array:
        x = as_points(x, self.dim)
        return functools.reduce(np.minimum, (p.distance(x) for p in self.pieces))

    def contains(self, x) -> Array:
        return self.distance(x) > 0.0

    @property
    def tube_width(self) -> float:
        return min(p.tube_width for p in self.pieces)


def signed_distance(domain: DomainSpec, x):
    """Oriented distance with derivatives of the active (minimising) piece.

    Ties are broken by the lowest piece index.  Returns
    ``(value, grad, hess, active_piece)`` with shapes (n,), (n, N), (n, N, N), (n,).
    """
    x = as_points(x, domain.dim)
    dists = domain.piece_distances(x)
    active = np.argmin(dists, axis=1)
    value = dists[np.arange(len(x)), active]
    grad = np.empty_like(x)
    hess = np.empty((len(x), domain.dim, domain.dim))
    for i, piece in enumerate(domain.pieces):
        sel = active == i
        if np.any(sel):
            grad[sel] = piece.gradient(x[sel])
            hess[sel] = piece.hessian(x[sel])
    return value, grad, hess, active


# ---------------------------------------------------------------------------
# shipped pieces


def slab_piece(normal, offset: float, bbox: tuple[Array, Array], name: str = "") -> SmoothPiece:
    """Half space ``{normal . x > offset}``; globally C^infinity."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    dim = len(n)
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)

    axis_aligned = np.count_nonzero(n) == 1
    k0 = int(np.argmax(np.abs(n)))

    def distance(x):
        x = as_points(x, dim)
        if axis_aligned:
            return n[k0] * x[:, k0] - offset
        return x @ n - offset

    def gradient(x):
        return np.broadcast_to(n, as_points(x, dim).shape).copy()

    def hessian(x):
        return np.zeros((len(as_points(x, dim)), dim, dim))

    def sampler(n_tan: int):
        # boundary points of the slab face restricted to the bounding box
        axis = int(np.argmax(np.abs(n)))
        if dim == 1:
            pts = np.array([[offset / n[0]]])
        else:
            others = [k for k in range(dim) if k != axis]
            grids = [np.linspace(lo[k], hi[k], n_tan + 2)[1:-1] for k in others]
            mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, dim - 1)
            pts = np.zeros((len(mesh), dim))
            pts[:, others] = mesh
            pts[:, axis] = (offset - mesh @ n[others]) / n[axis]
        return pts, np.broadcast_to(n, pts.shape).copy()

    return SmoothPiece(distance, gradient, hessian, np.inf, name, sampler)


def ball_piece(center, radius: float, tube_width: float | None = None) -> SmoothPiece:
    """Ball of given radius; d = R - |x - c|, smooth away from the centre."""
    c = np.asarray(center, dtype=float)
    dim = len(c)

    def distance(x):
        return radius - np.linalg.norm(as_points(x, dim) - c, axis=1)

    def gradient(x):
        y = as_points(x, dim) - c
        r = np.linalg.norm(y, axis=1, keepdims=True)
        return -y / np.where(r > 0, r, 1.0)

    def hessian(x):
        y = as_points(x, dim) - c
        r = np.linalg.norm(y, axis=1)
        rs = np.where(r > 0, r, 1.0)
        nrm = y / rs[:, None]
        eye = np.eye(dim)[None]
        return -(eye - nrm[:, :, None] * nrm[:, None, :]) / rs[:, None, None]

    def sampler(n_tan: int):
        if dim == 1:
            dirs = np.array([[1.0], [-1.0]])
        elif dim == 2:
            th = 2 * np.pi * np.arange(max(n_tan, 4)) / max(n_tan, 4)
            dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
        else:
            raise GeometryError("ball sampler supports N <= 2")
        return c + radius * dirs, -dirs

    tw = radius if tube_width is None else tube_width
    return SmoothPiece(distance, gradient, hessian, tw, "ball", sampler)


def interval(a: float = 0.0, b: float = 1.0) -> DomainSpec:
    bbox = (np.array([a]), np.array([b]))
    pieces = (slab_piece([1.0], a, bbox, "x>a"), slab_piece([-1.0], -b, bbox, "x<b"))
    return DomainSpec(pieces, bbox, "smooth")


def box(lo: Sequence[float], hi: Sequence[float]) -> DomainSpec:
    """Rectangle as an intersection of 2N slabs (a generalized C^2 domain)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if len(lo) == 1:
        return interval(lo[0], hi[0])
    bbox = (lo, hi)
    pieces = []
    for k in range(len(lo)):
        e = np.zeros(len(lo))
        e[k] = 1.0
        pieces.append(slab_piece(e, lo[k], bbox, f"x{k}>lo"))
        pieces.append(slab_piece(-e, -hi[k], bbox, f"x{k}<hi"))
    return DomainSpec(tuple(pieces), bbox, "generalized")


def disk(center=(0.0, 0.0), radius: float = 1.0, tube_width: float | None = None) -> DomainSpec:
    c = np.asarray(center, dtype=float)
    bbox = (c - radius, c + radius)
    return DomainSpec((ball_piece(c, radius, tube_width),), bbox, "smooth")


def domain_from_config(block: dict) -> DomainSpec:
    kind = block["kind"]
    bounds = block.get("bounds")
    if kind == "interval":
        a, b = bounds if bounds is not None else (0.0, 1.0)
        dom = interval(a, b)
    elif kind in ("box", "generalized_box"):
        lo, hi = bounds
        dom = box(lo, hi)
    elif kind == "disk":
        center = block.get("center", [0.0, 0.0])
        radius = bounds[0] if bounds else 1.0
        dom = disk(center, radius, block.get("delta0"))
    else:
        raise GeometryError(f"unknown domain kind {kind!r}")
    delta0 = block.get("delta0")
    if delta0 is not None and kind != "disk":
        pieces = tuple(
            SmoothPiece(p.distance, p.gradient, p.hessian, min(p.tube_width, delta0), p.name, p.boundary_sampler)
            for p in dom.pieces
        )
        dom = DomainSpec(pieces, dom.bounding_box, dom.kind)
    return dom


# ---------------------------------------------------------------------------
# product barrier for intersections


def _quintic_blend(delta: float) -> np.polynomial.Polynomial:
    s0, s1 = delta / 2.0, delta
    rows, rhs = [], []
    for s, (v, d1, d2) in ((s0, (s0, 1.0, 0.0)), (s1, (1.0, 0.0, 0.0))):
        rows.append([s**k for k in range(6)])
        rows.append([k * s ** (k - 1) if k >= 1 else 0.0 for k in range(6)])
        rows.append([k * (k - 1) * s ** (k - 2) if k >= 2 else 0.0 for k in range(6)])
        rhs += [v, d1, d2]
    coef = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.polynomial.Polynomial(coef)


@dataclass(frozen=True)
class BarrierFunction:
    """psi(x) = prod_i phi(d_i(x)) with phi(s)=s below delta/2 and 1 above delta."""

    domain: DomainSpec
    blend_width: float
    _poly: np.polynomial.Polynomial = field(repr=False)

    def phi(self, s, order: int = 0) -> Array:
        s = np.asarray(s, dtype=float)
        d = self.blend_width
        p = self._poly.deriv(order) if order else self._poly
        lin = s if order == 0 else (np.ones_like(s) if order == 1 else np.zeros_like(s))
        flat = np.ones_like(s) if order == 0 else np.zeros_like(s)
        return np.where(s <= d / 2, lin, np.where(s >= d, flat, p(s)))

    def evaluate(self, x):
        """Value, gradient and Hessian of psi at points x."""
        x = as_points(x, self.domain.dim)
        n, dim = x.shape
        pieces = self.domain.pieces
        d = np.stack([p.distance(x) for p in pieces], axis=1)
        g = np.stack([p.gradient(x) for p in pieces], axis=1)  # (n, k, N)
        hs = np.stack([p.hessian(x) for p in pieces], axis=1)  # (n, k, N, N)
        f0, f1, f2 = self.phi(d), self.phi(d, 1), self.phi(d, 2)
        k = len(pieces)
        value = np.prod(f0, axis=1)
        grad = np.zeros((n, dim))
        hess = np.zeros((n, dim, dim))
        for i in range(k):
            others = np.prod(np.delete(f0, i, axis=1), axis=1) if k > 1 else np.ones(n)
            grad += (others * f1[:, i])[:, None] * g[:, i]
            hess += (others * f1[:, i])[:, None, None] * hs[:, i]
            hess += (others * f2[:, i])[:, None, None] * np.einsum("na,nb->nab", g[:, i], g[:, i])
            for j in range(k):
                if j == i:
                    continue
                rest = np.prod(np.delete(f0, [i, j], axis=1), axis=1) if k > 2 else np.ones(n)
                w = rest * f1[:, i] * f1[:, j]
                hess += w[:, None, None] * np.einsum("na,nb->nab", g[:, i], g[:, j])
        return value, grad, hess

    def value(self, x) -> Array:
        return self.evaluate(x)[0]


def build_barrier(domain: DomainSpec, delta: float, n_check: int = 4001) -> BarrierFunction:
    """Product barrier with a quintic Hermite blend on [delta/2, delta].

    Raises BlendInfeasible when the blend is not monotone or dips below the
    identity on the blend interval (checked on a dense sample).
    """
    if delta <= 0:
        raise BlendInfeasible("blend width must be positive")
    if delta > domain.tube_width:
        raise BlendInfeasible(f"delta={delta} exceeds tube width {domain.tube_width}")
    poly = _quintic_blend(delta)
    s = np.linspace(delta / 2, delta, n_check)
    if np.any(poly.deriv()(s) < -1e-9) or np.any(poly(s) < s - 1e-9):
        raise BlendInfeasible(f"quintic blend is not admissible for delta={delta}")
    return BarrierFunction(domain, delta, poly)


# ---------------------------------------------------------------------------
# grids and masks


@dataclass(frozen=True)
class CellGrid:
    """Uniform cell-centred grid covering the bounding box."""

    lower: Array
    h: float
    shape: tuple[int, ...]

    @classmethod
    def over(cls, domain: DomainSpec, h: float) -> "CellGrid":
        lo, hi = domain.bounding_box
        counts = (hi - lo) / h
        shape = tuple(int(round(c)) for c in counts)
        if np.any(np.abs(np.array(shape) - counts) > 1e-8) or min(shape) < 1:
            raise GeometryError(f"h={h} does not tile the bounding box {lo}..{hi}")
        return cls(np.asarray(lo, dtype=float), float(h), shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    def centers(self) -> Array:
        """Cell centres in row-major (C) order, shape (size, N)."""
        axes = [self.lower[k] + (np.arange(n) + 0.5) * self.h for k, n in enumerate(self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class GridMasks:
    grid: CellGrid
    distance: Array
    interior: Array
    layer: Array


def grid_masks(domain: DomainSpec, h: float, eps: float = 0.0, delta: float | None = None) -> GridMasks:
    """Cells of the shrunk domain {d > eps} and of the layer {0 < d < delta}."""
    if h <= 0:
        raise GeometryError("h must be positive")
    if delta is None:
        delta = np.inf
    if eps < 0 or eps >= delta:
        raise GeometryError("need 0 <= eps < delta")
    grid = CellGrid.over(domain, h)
    d = domain.distance(grid.centers())
    interior = d > eps
    if not np.any(interior):
        raise EmptyDomain(f"no cell centre has distance > {eps} at h={h}")
    layer = (d > 0) & (d < delta)
    return GridMasks(grid, d, interior, layer)
