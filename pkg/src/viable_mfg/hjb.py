"""Backward solver for -u_t - tr(a D^2 u) + H(t, x, Du) = F with Neumann data.

The trace-form operator is rewritten in divergence form,
``-tr(a D^2 u) = -div(a Du) + b~ . Du`` with ``b~_j = sum_i d_i a_ij``, so the
diffusion is a symmetric finite-volume matrix and the first-order part is
``H + b~ . Du``.  Each backward step is

    (I + dt L) u^n = u^{n+1} - dt [H(t, x, Du^{n+1}) + b~ . Du^{n+1} - F^n]

with ``L`` factorised once.  The gradient inside ``H + b~ . p`` is upwinded
against the transport velocity ``c = Hp(p_central) + b~``.

Two regularisations are available: ``eps_penalty`` adds ``eps I`` to the
diffusion and truncates H at level 1/eps on the whole domain; ``shrink_eps``
solves on the shrunk set {d > eps} with zero-flux faces on its boundary.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import CFLViolation, GridMismatch, SolverDiverged
from .fields import MaskedGrid, SpaceTimeField
from .geometry import DomainSpec
from .models import DiffusionField, HamiltonianModel, divergence_drift, truncate_hamiltonian
from .operators import LinearSolve, central_gradient, diffusion_operator, one_sided, upwind_gradient

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HJBConfig:
    """Discretisation parameters shared by the HJB and FP solvers."""

    h: float
    dt: float
    T: float = 1.0
    eps_penalty: float = 0.0
    shrink_eps: float = 0.0
    cfl_guard: bool = True
    linear_solver: str = "direct"
    tol: float = 1e-12
    max_inner: int = 1000

    def __post_init__(self):
        if self.h <= 0 or self.dt <= 0 or self.T <= 0:
            raise ValueError("h, dt and T must be positive")
        if self.eps_penalty < 0 or self.shrink_eps < 0:
            raise ValueError("eps_penalty and shrink_eps must be >= 0")
        if self.linear_solver not in ("direct", "bicgstab"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def mesh(self, domain: DomainSpec) -> MaskedGrid:
        return MaskedGrid.for_domain(domain, self.h, self.shrink_eps)

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# data normalisation


def time_slices(F, mesh: MaskedGrid, times: np.ndarray) -> np.ndarray:
    """F as an array of shape (len(times), mesh.n).

    Accepts a scalar, a callable ``F(t, x)``, an array on ``mesh`` or a
    SpaceTimeField on a grid with the same bounding lattice.
    """
    nt = len(times)
    if F is None:
        return np.zeros((nt, mesh.n))
    if isinstance(F, SpaceTimeField):
        if len(F.times) != nt or not np.allclose(F.times, times):
            raise GridMismatch("F lives on a different time axis")
        if F.mesh.same_layout(mesh):
            return F.values
        return F.mesh.restrict(F.values, mesh)
    if callable(F):
        return np.stack([np.broadcast_to(np.asarray(F(t, mesh.centers), dtype=float), (mesh.n,)) for t in times])
    arr = np.asarray(F, dtype=float)
    if arr.ndim == 0:
        return np.full((nt, mesh.n), float(arr))
    if arr.shape == (mesh.n,):
        return np.broadcast_to(arr, (nt, mesh.n)).copy()
    if arr.shape != (nt, mesh.n):
        raise GridMismatch(f"F has shape {arr.shape}, expected ({nt}, {mesh.n})")
    return arr


def cell_values(G, mesh: MaskedGrid) -> np.ndarray:
    """Terminal data as a vector on ``mesh`` (scalar, callable G(x) or array)."""
    if callable(G):
        return np.broadcast_to(np.asarray(G(mesh.centers), dtype=float), (mesh.n,)).copy()
    arr = np.asarray(G, dtype=float)
    if arr.ndim == 0:
        return np.full(mesh.n, float(arr))
    if arr.shape != (mesh.n,):
        raise GridMismatch(f"terminal data has shape {arr.shape}, expected ({mesh.n},)")
    return arr.copy()


_WARNED: set = set()


def _warn_if_unregularised(config: HJBConfig, domain: DomainSpec, a: DiffusionField, model: HamiltonianModel):
    key = (id(domain), id(a), id(model))
    if key in _WARNED:
        return
    _WARNED.add(key)
    if config.eps_penalty > 0 or config.shrink_eps > 0 or model.growth.kind != "power":
        return
    for piece in domain.pieces:
        if piece.boundary_sampler is None:
            continue
        xb, nrm = piece.boundary_sampler(5)
        inside = domain.distance(xb) >= -1e-12
        if not np.any(inside):
            continue
        A = a(xb[inside])
        normal_flux = np.einsum("ni,nij,nj->n", nrm[inside], A, nrm[inside])
        if np.any(normal_flux < 1e-12):
            logger.warning("a degenerates on the boundary and Hp is unbounded; "
                           "consider eps_penalty > 0 or shrink_eps > 0")
            return


# ---------------------------------------------------------------------------
# solver


def solve_hjb(domain: DomainSpec, a: DiffusionField, model: HamiltonianModel, F_field, G_values,
              config: HJBConfig) -> SpaceTimeField:
    """March the discrete HJB equation backward from u(T) = G.

    The returned field carries ``metadata["transport"]``: for each step n the
    velocity ``c = Hp + b~`` at ``t_{n+1}`` used for upwinding, shape
    (N_t, n, N).  The FP solver takes it as its drift so that the pair is an
    exact discrete adjoint.
    """
    _warn_if_unregularised(config, domain, a, model)
    mesh = config.mesh(domain)
    times = config.times()
    dt = times[1] - times[0]
    Fv = time_slices(F_field, mesh, times)
    u = np.empty((len(times), mesh.n))
    u[-1] = cell_values(G_values, mesh)
    if config.eps_penalty > 0:
        model = truncate_hamiltonian(model, config.eps_penalty)

    L = diffusion_operator(mesh, a, config.eps_penalty)
    solve = LinearSolve(sp.identity(mesh.n) + dt * L, config.linear_solver, config.tol, config.max_inner)
    btilde = divergence_drift(a, mesh.centers)
    transport = np.empty((len(times) - 1, mesh.n, mesh.dim))
    for n in range(len(times) - 2, -1, -1):
        t = times[n + 1]
        c = model.Hp(t, mesh.centers, central_gradient(mesh, u[n + 1])) + btilde
        if config.cfl_guard:
            cfl = dt * float(np.max(np.abs(c).sum(axis=1))) / mesh.h
            if cfl > 1.0 + 1e-12:
                raise CFLViolation(f"dt * max|Hp + b~| / h = {cfl:.3g} > 1 at t = {t:.4g}")
        p = upwind_gradient(mesh, u[n + 1], c)
        ham = model.H(t, mesh.centers, p) + np.sum(btilde * p, axis=1)
        u[n] = solve(u[n + 1] - dt * (ham - Fv[n]))
        if not np.all(np.isfinite(u[n])):
            raise SolverDiverged(f"non-finite values at t = {times[n]:.4g}")
        transport[n] = c
    meta = {"scheme": "implicit-diffusion/explicit-upwind", **config.as_dict(), "model": model.name,
            "transport": transport}
    return SpaceTimeField(mesh, times, u, meta)


def max_principle_bound(F_field, G_values, model: HamiltonianModel, T: float | None = None) -> float:
    """B = ||G||_inf + T (||F||_inf + h0_bound)."""
    if T is None:
        if not isinstance(F_field, SpaceTimeField):
            raise ValueError("T is required unless F_field is a SpaceTimeField")
        T = F_field.T
    Fn = F_field.sup_norm() if isinstance(F_field, SpaceTimeField) else float(np.max(np.abs(F_field)))
    Gn = float(np.max(np.abs(G_values)))
    return Gn + T * (Fn + model.h0_bound)


# ---------------------------------------------------------------------------
# diagnostics


def _margin_cells(mesh: MaskedGrid, margin: float) -> np.ndarray:
    if margin <= 0:
        return np.ones(mesh.n, dtype=bool)
    return mesh.distance > margin


def lipschitz_estimate(u: SpaceTimeField, interior_margin: float = 0.0) -> float:
    """sup over slices and cells of |Du| built from one-sided differences.

    Per axis the larger one-sided difference is used; differences that reach
    outside the ``interior_margin`` region are ignored.
    """
    mesh = u.mesh
    keep = _margin_cells(mesh, interior_margin)
    best = 0.0
    for vals in u.values:
        sq = np.zeros(mesh.n)
        for k in range(mesh.dim):
            fwd, bwd = one_sided(mesh, vals, k)
            okp = (mesh.plus[k] >= 0) & keep[np.maximum(mesh.plus[k], 0)]
            okm = (mesh.minus[k] >= 0) & keep[np.maximum(mesh.minus[k], 0)]
            g = np.maximum(np.where(okp, np.abs(fwd), 0.0), np.where(okm, np.abs(bwd), 0.0))
            sq += g * g
        if np.any(keep):
            best = max(best, float(np.sqrt(sq[keep].max())))
    return best


def default_offsets(dim: int) -> list[tuple[int, ...]]:
    eye = np.eye(dim, dtype=int)
    offs = [tuple(e) for e in eye]
    if dim == 2:
        offs += [(1, 1), (1, -1)]
    return offs


def semiconcavity_estimate(u: SpaceTimeField, h_set=None, interior_margin: float = 0.0) -> float:
    """sup of (u(x+e) + u(x-e) - 2u(x)) / |e|^2 over lattice offsets e.

    Triples leaving the mask (or the ``interior_margin`` region) are skipped.
    """
    mesh = u.mesh
    offsets = default_offsets(mesh.dim) if h_set is None else [tuple(int(v) for v in np.atleast_1d(e)) for e in h_set]
    keep = _margin_cells(mesh, interior_margin)
    full = mesh.to_full(np.where(keep, u.values, np.nan))
    best = -np.inf
    shape = mesh.grid.shape
    for e in offsets:
        e = np.asarray(e)
        if np.all(e == 0):
            continue
        core = tuple(slice(max(0, abs(s)), n - abs(s)) for s, n in zip(e, shape))
        if any(sl.start >= sl.stop for sl in core):
            continue
        fwd = tuple(slice(sl.start + s, sl.stop + s) for sl, s in zip(core, e))
        bwd = tuple(slice(sl.start - s, sl.stop - s) for sl, s in zip(core, e))
        c0 = full[(slice(None),) + core]
        sd = full[(slice(None),) + fwd] + full[(slice(None),) + bwd] - 2 * c0
        sd = sd / (mesh.h**2 * float(e @ e))
        if np.any(np.isfinite(sd)):
            best = max(best, float(np.nanmax(sd)))
    return best if np.isfinite(best) else 0.0


# ---------------------------------------------------------------------------
# epsilon continuation


@dataclass
class ContinuationStep:
    eps: float
    field: SpaceTimeField
    diff: float | None


def _common_diff(prev: SpaceTimeField, cur: SpaceTimeField, margin: float, norm: Callable) -> float:
    if prev.mesh.grid.shape != cur.mesh.grid.shape or not np.allclose(prev.times, cur.times):
        raise GridMismatch("continuation members must share h and dt")
    both = prev.mesh.mask & cur.mesh.mask
    full_d = np.zeros(prev.mesh.grid.size)
    full_d[prev.mesh.mask] = prev.mesh.distance
    if margin > 0:
        both &= full_d > margin
    a = np.zeros((len(prev.times), prev.mesh.grid.size))
    b = np.zeros_like(a)
    a[:, prev.mesh.mask] = prev.values
    b[:, cur.mesh.mask] = cur.values
    return norm(a[:, both] - b[:, both])


def epsilon_continuation(domain: DomainSpec, a: DiffusionField, model: HamiltonianModel, F, G,
                         config: HJBConfig, eps_sequence, mode: str = "penalized",
                         interior_margin: float = 0.0) -> list[ContinuationStep]:
    """Solve for each eps and report the sup distance to the previous member.

    The distance is taken over all slices on the intersection of the two
    masks, restricted to d > ``interior_margin``.  F and G must be given in a
    mesh-independent form (scalar or callable) in shrink mode.
    """
    eps_sequence = [float(e) for e in eps_sequence]
    if any(e < 0 for e in eps_sequence) or any(b > a_ for a_, b in zip(eps_sequence, eps_sequence[1:])):
        raise ValueError("eps_sequence must be nonnegative and decreasing")
    if mode not in ("penalized", "shrink"):
        raise ValueError(f"unknown continuation mode {mode!r}")
    out: list[ContinuationStep] = []
    for eps in eps_sequence:
        key = "eps_penalty" if mode == "penalized" else "shrink_eps"
        cfg = HJBConfig(**{**config.as_dict(), key: eps})
        u = solve_hjb(domain, a, model, F, G, cfg)
        diff = None
        if out:
            diff = _common_diff(out[-1].field, u, interior_margin, lambda w: float(np.max(np.abs(w), initial=0.0)))
        logger.info("continuation eps=%g diff=%s", eps, diff)
        out.append(ContinuationStep(eps, u, diff))
    return out
