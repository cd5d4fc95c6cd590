"""Damped Picard iteration for the coupled HJB / Fokker-Planck system.

One outer iteration solves the HJB equation against the current density path,
transports m0 with the resulting velocity ``Hp(Du) + b~`` and relaxes
``m <- (1 - theta) m + theta m_hat``.  The FP step matrices are the transposes
of the HJB linear parts, so the pair is an exact discrete adjoint and the
duality gap below vanishes for identical solutions.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InvarianceFailed, NotConverged
from .fields import DensityField, SpaceTimeField, check_same_grid
from .fp import initial_density, solve_fp
from .geometry import DomainSpec
from .hjb import HJBConfig, lipschitz_estimate, semiconcavity_estimate, solve_hjb
from .invariance import check_hjb_invariance
from .models import CouplingF, CouplingG, DiffusionField, HamiltonianModel, divergence_drift
from .operators import cell_gradient, central_gradient, divergence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MFGProblem:
    domain: DomainSpec
    a: DiffusionField
    model: HamiltonianModel
    F: CouplingF
    G: CouplingG
    m0: object
    T: float = 1.0


@dataclass(frozen=True)
class MFGConfig:
    h: float
    dt: float
    eps_penalty: float = 0.0
    shrink_eps: float = 0.0
    damping: float = 0.5
    tol: float = 1e-6
    max_iters: int = 200
    invariance: str = "enforce"  # enforce | warn | skip
    invariance_delta: float = 0.1
    cfl_guard: bool = True
    linear_solver: str = "direct"
    linear_tol: float = 1e-12
    strict: bool = False

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.invariance not in ("enforce", "warn", "skip"):
            raise ValueError(f"unknown invariance mode {self.invariance!r}")

    def solver(self, T: float) -> HJBConfig:
        return HJBConfig(h=self.h, dt=self.dt, T=T, eps_penalty=self.eps_penalty, shrink_eps=self.shrink_eps,
                         cfl_guard=self.cfl_guard, linear_solver=self.linear_solver, tol=self.linear_tol)

    def refined(self) -> "MFGConfig":
        return replace(self, h=self.h / 2, dt=self.dt / 2)


@dataclass
class MFGSolution:
    u: SpaceTimeField
    m: DensityField
    iterations: int
    residual_history: list[float]
    converged: bool
    config: MFGConfig
    duality_gap: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_residual": self.residual_history[-1] if self.residual_history else None,
            "duality_gap": self.duality_gap,
            **{k: v for k, v in self.diagnostics.items() if np.isscalar(v)},
        }


def _l1_sup(a: np.ndarray, b: np.ndarray, vol: float) -> float:
    return float((np.abs(a - b).sum(axis=1) * vol).max())


def _guess_path(guess, mesh, n_times) -> np.ndarray:
    if isinstance(guess, np.ndarray) and guess.shape == (n_times, mesh.n):
        return guess.astype(float).copy()
    return np.tile(initial_density(guess, mesh), (n_times, 1))


def boundary_condition_margin(u: SpaceTimeField, problem: MFGProblem, delta: float) -> tuple[float, np.ndarray]:
    """Worst value of (b~ + Hp(t, x, Du)) . Dd over layer cells and slices."""
    mesh = u.mesh
    layer = (mesh.distance > 0) & (mesh.distance < delta)
    if not np.any(layer):
        return -np.inf, np.empty(0)
    from .geometry import signed_distance

    x = mesh.centers[layer]
    _, Dd, _, _ = signed_distance(problem.domain, x)
    bt = divergence_drift(problem.a, x)
    vals = []
    for t, slice_ in zip(u.times, u.values):
        p = cell_gradient(mesh, slice_)[layer]
        vals.append(np.sum((bt + problem.model.Hp(t, x, p)) * Dd, axis=1))
    vals = np.stack(vals)
    return float(vals.max()), vals


def solve_mfg(problem: MFGProblem, config: MFGConfig, initial_guess=None) -> MFGSolution:
    """Damped Picard loop; stops when sup_t ||m^{k+1} - m^k||_L1 < tol."""
    if config.invariance != "skip":
        report = check_hjb_invariance(problem.domain, problem.a, problem.model, config.invariance_delta)
        if not report.passed:
            msg = f"invariance check failed (fitted C = {report.fitted_C})"
            if config.invariance == "enforce":
                raise InvarianceFailed(msg)
            logger.warning(msg)
    scfg = config.solver(problem.T)
    mesh = scfg.mesh(problem.domain)
    times = scfg.times()
    vol = mesh.cell_volume
    m0 = initial_density(problem.m0, mesh)
    m = _guess_path(m0 if initial_guess is None else initial_guess, mesh, len(times))
    decoupled = not (problem.F.depends_on_m or problem.G.depends_on_m)
    theta = 1.0 if decoupled else config.damping

    history: list[float] = []
    u = fp = None
    converged = False
    for k in range(1, config.max_iters + 1):
        u = solve_hjb(problem.domain, problem.a, problem.model, problem.F.path(times, mesh, m),
                      problem.G.evaluate(mesh, m[-1]), scfg)
        fp = solve_fp(problem.domain, problem.a, u.metadata["transport"], m0, scfg)
        new = (1 - theta) * m + theta * fp.values
        res = _l1_sup(new, m, vol)
        history.append(res)
        m = new
        logger.debug("picard %d residual %.3e", k, res)
        if decoupled or res < config.tol:
            converged = True
            break
    if not decoupled and theta < 1:
        # final consistent pair: u from the returned density path, m transported by it
        u = solve_hjb(problem.domain, problem.a, problem.model, problem.F.path(times, mesh, m),
                      problem.G.evaluate(mesh, m[-1]), scfg)
        fp = solve_fp(problem.domain, problem.a, u.metadata["transport"], m0, scfg)
    sol = MFGSolution(u, fp, len(history), history, converged, config)
    sol.diagnostics = solution_diagnostics(sol, problem, config.invariance_delta)
    if not converged:
        msg = f"Picard iteration stopped after {config.max_iters} iterations (residual {history[-1]:.3e})"
        if config.strict:
            raise NotConverged(msg, sol)
        logger.warning(msg)
    return sol


def solution_diagnostics(sol: MFGSolution, problem: MFGProblem, delta: float) -> dict:
    margin, _ = boundary_condition_margin(sol.u, problem, delta)
    return {
        "sup_Du": lipschitz_estimate(sol.u),
        "semiconcavity": semiconcavity_estimate(sol.u),
        "m_sup": float(sol.m.values.max()),
        "boundary_margin": margin,
        "mass_drift": float(np.abs(sol.m.mass() - sol.m.mass()[0]).max()),
    }


# ---------------------------------------------------------------------------
# certificates


@dataclass
class GapReport:
    terminal: float
    running: float
    bregman_1: float
    bregman_2: float

    @property
    def total(self) -> float:
        return self.terminal + self.running + self.bregman_1 + self.bregman_2

    def terms(self) -> dict:
        return {**asdict(self), "total": self.total}


def duality_gap(sol1: MFGSolution, sol2: MFGSolution, problem: MFGProblem) -> GapReport:
    """Monotonicity pairings plus the two Bregman terms, each on the grid.

    Slice n+1 of m is paired with the gradient of slice n+1 of u, which is
    the gradient that produced the transport of step n.
    """
    check_same_grid(sol1.u, sol2.u)
    check_same_grid(sol1.m, sol2.m)
    mesh = sol1.m.mesh
    times = sol1.m.times
    dt = sol1.m.dt
    vol = mesh.cell_volume
    m1, m2 = sol1.m.values, sol2.m.values
    dm = m1 - m2
    terminal = vol * float((problem.G.evaluate(mesh, m1[-1]) - problem.G.evaluate(mesh, m2[-1])) @ dm[-1])
    F1 = problem.F.path(times, mesh, m1)
    F2 = problem.F.path(times, mesh, m2)
    running = dt * vol * float(np.sum((F1 - F2)[:-1] * dm[:-1]))
    b1 = b2 = 0.0
    H = problem.model
    for n in range(1, len(times)):
        t = times[n]
        p1 = central_gradient(mesh, sol1.u.values[n])
        p2 = central_gradient(mesh, sol2.u.values[n])
        b1 += float(m1[n] @ H.bregman(t, mesh.centers, p2, p1))
        b2 += float(m2[n] @ H.bregman(t, mesh.centers, p1, p2))
    return GapReport(terminal, running, dt * vol * b1, dt * vol * b2)


@dataclass
class MBoundReport:
    worst_margin: float
    condition_holds: bool
    m_sup: float
    m_sup_refined: float | None
    growth: float | None
    k: float
    predicted_bound: float

    @property
    def stable(self) -> bool | None:
        return None if self.growth is None else abs(self.growth) < 0.10

    def summary(self) -> dict:
        return {**asdict(self), "stable": self.stable}


def _compression_rate(sol: MFGSolution) -> float:
    """k = max(0, max div(beta)); m_t = ... + m div(beta) gives ||m||_inf <= e^{kT} ||m0||_inf."""
    worst = 0.0
    for beta in sol.m.drift:
        worst = max(worst, float(divergence(sol.m.mesh, beta).max()))
    return worst


def m_bound_check(sol: MFGSolution, problem: MFGProblem, delta: float, refine: bool = True,
                  initial_guess=None) -> MBoundReport:
    """Check (b~ + Hp(Du)).Dd <= 0 on the layer and the stability of ||m||_inf.

    With ``refine`` the problem is re-solved at h/2, dt/2 and the relative
    growth of ||m||_inf is reported.
    """
    worst, _ = boundary_condition_margin(sol.u, problem, delta)
    m_sup = float(sol.m.values.max())
    k = _compression_rate(sol)
    bound = float(np.exp(k * problem.T) * sol.m.values[0].max())
    fine_sup = growth = None
    if refine:
        fine = solve_mfg(problem, replace(sol.config.refined(), invariance="skip"), initial_guess)
        fine_sup = float(fine.m.values.max())
        growth = fine_sup / m_sup - 1.0
    return MBoundReport(worst, worst <= 1e-12, m_sup, fine_sup, growth, k, bound)
