"""Forward solver for m_t - div(a Dm) - div(m beta) = 0 with zero boundary flux.

``beta`` is the divergence-form drift.  For a trace-form generator with state
velocity v, ``beta = -v + b~``; for the MFG system ``beta = Hp + b~``.

Each step solves ``(I + dt (L + U(beta)^T)) m^{n+1} = m^n`` where ``L`` and
``U`` are the same matrices the HJB solver uses.  Columns of ``L + U^T`` sum
to zero, so mass is conserved to linear-solver precision, and the system
matrix is an M-matrix, so the scheme is positivity preserving for any dt.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DriftMismatch, DriftUnboundedOnMask, GridMismatch, NegativeDensity
from .fields import DensityField, MaskedGrid, check_same_grid
from .geometry import DomainSpec
from .hjb import HJBConfig, cell_values
from .models import DiffusionField
from .operators import LinearSolve, diffusion_operator, upwind_operator

logger = logging.getLogger(__name__)

DRIFT_LIMIT = 1e8
NEGATIVE_TOL = 1e-12

FPConfig = HJBConfig


def drift_slices(drift, mesh: MaskedGrid, times: np.ndarray) -> np.ndarray:
    """Drift per step as an array (N_t, n, N); step n uses the field at t_{n+1}.

    Accepts a callable ``beta(t, x)``, a constant vector, or a ready array.
    """
    nsteps = len(times) - 1
    shape = (nsteps, mesh.n, mesh.dim)
    if drift is None:
        out = np.zeros(shape)
    elif callable(drift):
        out = np.stack([np.broadcast_to(np.asarray(drift(t, mesh.centers), dtype=float), (mesh.n, mesh.dim))
                        for t in times[1:]])
    else:
        arr = np.asarray(drift, dtype=float)
        if arr.shape == shape:
            out = arr
        elif arr.shape == (mesh.n, mesh.dim) or arr.ndim <= 1:
            out = np.broadcast_to(arr, shape).copy()
        else:
            raise GridMismatch(f"drift has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(out)) or np.max(np.abs(out), initial=0.0) > DRIFT_LIMIT:
        raise DriftUnboundedOnMask("drift is non-finite or exceeds 1e8 on the mask; use shrink_eps > 0")
    return out


def initial_density(m0, mesh: MaskedGrid) -> np.ndarray:
    """m0 on the active cells: callable m0(x), scalar, compact array or full-grid array."""
    arr = m0
    if not callable(m0):
        arr = np.asarray(m0, dtype=float)
        if arr.ndim >= 1 and arr.size == mesh.grid.size and arr.size != mesh.n:
            arr = arr.ravel()[mesh.mask]
    vals = cell_values(arr, mesh)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise NegativeDensity("m0 must be finite and nonnegative")
    return vals


class TransportOperators:
    """Step matrices Q_n = I + dt (L + U(beta^n)^T) with factorisation reuse."""

    def __init__(self, mesh: MaskedGrid, a: DiffusionField, drift: np.ndarray, dt: float, config: HJBConfig):
        self.mesh = mesh
        self.dt = dt
        self.drift = drift
        self.config = config
        self._L = diffusion_operator(mesh, a, config.eps_penalty)
        self._I = sp.identity(mesh.n, format="csr")
        self._cache: tuple[np.ndarray, LinearSolve] | None = None

    def step(self, n: int) -> LinearSolve:
        beta = self.drift[n]
        if self._cache is not None and np.array_equal(self._cache[0], beta):
            return self._cache[1]
        Q = self._I + self.dt * (self._L + upwind_operator(self.mesh, beta).T)
        solver = LinearSolve(Q, self.config.linear_solver, self.config.tol, self.config.max_inner)
        self._cache = (beta, solver)
        return solver


def solve_fp(domain: DomainSpec, a: DiffusionField, drift, m0, config: HJBConfig) -> DensityField:
    mesh = config.mesh(domain)
    times = config.times()
    dt = times[1] - times[0]
    beta = drift_slices(drift, mesh, times)
    ops = TransportOperators(mesh, a, beta, dt, config)
    m = np.empty((len(times), mesh.n))
    m[0] = initial_density(m0, mesh)
    worst = 0.0
    for n in range(len(times) - 1):
        nxt = ops.step(n)(m[n])
        low = float(nxt.min())
        if low < -NEGATIVE_TOL:
            raise NegativeDensity(f"density minimum {low:.3e} at t = {times[n + 1]:.4g}")
        if low < 0:
            worst = min(worst, low)
            nxt = np.maximum(nxt, 0.0)
        m[n + 1] = nxt
    if worst < 0:
        logger.info("clipped negative undershoots down to %.3e", worst)
    meta = {"scheme": "implicit/donor-cell", **config.as_dict()}
    return DensityField(mesh, times, m, meta, drift=beta, min_before_clip=worst)


def mass_trace(m: DensityField) -> np.ndarray:
    return m.mass()


def boundary_mass(m: DensityField, delta: float) -> np.ndarray:
    """Per-slice mass in the layer 0 < d < delta."""
    layer = (m.mesh.distance > 0) & (m.mesh.distance < delta)
    return m.values[:, layer].sum(axis=1) * m.mesh.cell_volume


def adjoint_solve(ops: TransportOperators, terminal: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Backward march phi^n = Q_n^{-T} phi^{n+1} + dt * source^n, phi^N = terminal."""
    nsteps = source.shape[0]
    phi = np.empty((nsteps + 1, ops.mesh.n))
    phi[-1] = terminal
    for n in range(nsteps - 1, -1, -1):
        phi[n] = ops.step(n)(phi[n + 1], transpose=True) + ops.dt * source[n]
    return phi


def dual_uniqueness_identity(m1: DensityField, m2: DensityField, domain: DomainSpec, a: DiffusionField,
                             drift, config: HJBConfig) -> tuple[float, float]:
    """(direct, dual) for w = m1 - m2.

    direct = sum_{n < N} dt h^N sum |w^n|; dual = h^N <w^0, phi^0> where phi
    solves the discrete adjoint with source sgn(w) and phi(T) = 0.  They agree
    whenever both densities were produced by the same step matrices.
    """
    check_same_grid(m1, m2)
    mesh = m1.mesh
    beta = drift_slices(drift, mesh, m1.times)
    for other in (m1.drift, m2.drift):
        if other is not None and (other.shape != beta.shape or not np.allclose(other, beta, rtol=1e-12, atol=1e-12)):
            raise DriftMismatch("densities were transported by different drifts")
    w = m1.values - m2.values
    dt = m1.dt
    vol = mesh.cell_volume
    direct = float(dt * vol * np.abs(w[:-1]).sum())
    if not np.any(w):
        return direct, 0.0
    ops = TransportOperators(mesh, a, beta, dt, config)
    phi = adjoint_solve(ops, np.zeros(mesh.n), np.sign(w[:-1]))
    dual = float(vol * w[0] @ phi[0])
    return direct, dual


@dataclass
class FPContinuationStep:
    eps: float
    density: DensityField
    l1_diff: np.ndarray | None
    sup_diff: float | None


def epsilon_continuation_fp(domain: DomainSpec, a: DiffusionField, drift, m0, config: HJBConfig,
                            eps_sequence) -> list[FPContinuationStep]:
    """Solve on nested shrunk masks; L1 distances use zero extension to the full grid."""
    eps_sequence = [float(e) for e in eps_sequence]
    if any(e < 0 for e in eps_sequence) or any(b > a_ for a_, b in zip(eps_sequence, eps_sequence[1:])):
        raise ValueError("eps_sequence must be nonnegative and decreasing")
    out: list[FPContinuationStep] = []
    prev_full = None
    for eps in eps_sequence:
        cfg = HJBConfig(**{**config.as_dict(), "shrink_eps": eps})
        m = solve_fp(domain, a, drift, m0, cfg)
        full = np.zeros((len(m.times), m.mesh.grid.size))
        full[:, m.mesh.mask] = m.values
        if prev_full is None:
            out.append(FPContinuationStep(eps, m, None, None))
        else:
            if prev_full.shape != full.shape:
                raise GridMismatch("continuation members must share h and dt")
            l1 = np.abs(full - prev_full).sum(axis=1) * m.mesh.cell_volume
            out.append(FPContinuationStep(eps, m, l1, float(l1.max())))
        prev_full = full
    return out
