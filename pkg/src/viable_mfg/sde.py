"""Monte Carlo layer: Euler-Maruyama paths of dX = b dt + sqrt(2) sigma dB.

A step that leaves the domain is retried from the pre-step state with 2^k
substeps, k = 1..substep_limit, using fresh normals; if every retry exits the
path is flagged as exited and frozen at its last interior state.  Nothing is
reflected or projected, so the exit fraction measures the discretisation's
failure to respect invariance.

Every path owns a counter-based Philox stream keyed by (seed, path index).
The main stream is consumed sequentially, one normal vector per step; retry
k of step s draws from the counter block [0, 0, s + 1, k].  Results do not
depend on the chunking of paths or on the number of workers.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import distance_transform_edt

from .errors import NoStoredPaths, ViableMFGError
from .fields import DensityField, MaskedGrid, SpaceTimeField
from .geometry import DomainSpec, as_points
from .models import DiffusionField, HamiltonianModel, divergence_drift
from .operators import cell_gradient

logger = logging.getLogger(__name__)

PATHS_MAGIC = b"VMFGPTH1"
QUANTILES = (0.01, 0.10, 0.50)


@dataclass(frozen=True)
class SDEConfig:
    dt: float
    n_paths: int
    seed: int = 0
    substep_limit: int = 4
    drift_mode: str = "fixed"  # fixed | feedback
    n_samples: int = 50
    chunk_paths: int = 4096
    block_steps: int = 1000
    workers: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.drift_mode not in ("fixed", "feedback"):
            raise ValueError(f"unknown drift mode {self.drift_mode!r}")


@dataclass
class PathStore:
    """Positions at sample times, shape (n_samples, n_paths, N)."""

    times: np.ndarray
    X: np.ndarray
    exited: np.ndarray
    exit_time: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]


@dataclass
class ViabilityStats:
    exit_fraction: float
    exit_se: float
    min_distance_quantiles: tuple[float, float, float]
    lyapunov_slope: float
    lyapunov_se: float
    sample_times: np.ndarray
    mean_V: np.ndarray
    n_paths: int
    dt: float
    table: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "dt": self.dt,
            "n_paths": self.n_paths,
            "exit_fraction": self.exit_fraction,
            "exit_se": self.exit_se,
            "min_distance_quantiles": dict(zip(("q01", "q10", "q50"), self.min_distance_quantiles)),
            "lyapunov_slope": self.lyapunov_slope,
            "lyapunov_se": self.lyapunov_se,
            "table": self.table,
        }


@dataclass
class SimulationResult:
    stats: ViabilityStats
    paths: PathStore | None = None


# ---------------------------------------------------------------------------
# coefficient normalisation


def _sigma_fn(sigma, dim):
    if isinstance(sigma, DiffusionField):
        if sigma.sigma is None:
            raise ViableMFGError("diffusion field has no square root")
        return sigma.sigma
    if callable(sigma):
        return sigma
    S = np.asarray(sigma, dtype=float) * np.eye(dim) if np.ndim(sigma) == 0 else np.asarray(sigma, dtype=float)
    return lambda x: np.broadcast_to(S, (len(x), dim, dim))


def _drift_fn(drift, dim):
    if callable(drift):
        return drift
    v = np.zeros(dim) if drift is None else np.asarray(drift, dtype=float)
    return lambda t, x: np.broadcast_to(v, x.shape)


def _initial_points(x0, n_paths: int, dim: int, seed: int) -> np.ndarray:
    """A point, an (n_paths, N) array, or a density given as (MaskedGrid, values)."""
    if isinstance(x0, SpaceTimeField):
        x0 = (x0.mesh, x0.values[0])
    if isinstance(x0, tuple) and len(x0) == 2 and isinstance(x0[0], MaskedGrid):
        mesh, vals = x0
        p = np.maximum(np.asarray(vals, dtype=float), 0.0)
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2**64 - 1], dtype=np.uint64)))
        cells = rng.choice(mesh.n, size=n_paths, p=p / p.sum())
        jitter = rng.uniform(-0.5, 0.5, size=(n_paths, dim)) * mesh.h
        return mesh.centers[cells] + jitter
    arr = np.asarray(x0, dtype=float)
    if arr.shape == (n_paths, dim):
        return arr.copy()
    return np.broadcast_to(as_points(arr, dim)[0], (n_paths, dim)).copy()


# ---------------------------------------------------------------------------
# simulation


@dataclass
class _ChunkOut:
    X_samples: np.ndarray
    exited: np.ndarray
    exit_time: np.ndarray
    min_d: np.ndarray
    V_sum: np.ndarray
    slope_terms: np.ndarray


class _Simulator:
    def __init__(self, domain, sigma, drift, X0, T, config: SDEConfig, store: bool):
        self.domain = domain
        self.dim = domain.dim
        self.sigma = _sigma_fn(sigma, self.dim)
        self.drift = _drift_fn(drift, self.dim)
        self.X0 = X0
        self.cfg = config
        self.n_steps = max(1, int(round(T / config.dt)))
        self.dt = T / self.n_steps
        self.sample_steps = np.unique(np.round(np.linspace(0, self.n_steps, config.n_samples + 1)).astype(int))
        self.sample_times = self.sample_steps * self.dt
        self.store = store
        s = self.sample_times
        self._slope_w = s / np.sum(s * s) if np.any(s > 0) else np.zeros_like(s)

    def _V(self, X):
        return -np.log(np.maximum(self.domain.distance(X), np.finfo(float).tiny))

    def _step(self, t, X, Z, dt):
        S = self.sigma(X)
        noise = S[:, :, 0] * Z if self.dim == 1 else np.einsum("pij,pj->pi", S, Z)
        out = self.drift(t, X) * dt
        out += X
        noise *= np.sqrt(2 * dt)
        out += noise
        return out

    def _retry(self, path: int, step: int, x: np.ndarray):
        t0 = step * self.dt
        for k in range(1, self.cfg.substep_limit + 1):
            gen = np.random.Generator(np.random.Philox(key=[self.cfg.seed, path], counter=[0, 0, step + 1, k]))
            n_sub = 2**k
            hs = self.dt / n_sub
            Z = gen.standard_normal((n_sub, self.dim))
            y = x[None, :].copy()
            ok = True
            for i in range(n_sub):
                y = self._step(t0 + i * hs, y, Z[i : i + 1], hs)
                if self.domain.distance(y)[0] <= 0:
                    ok = False
                    break
            if ok:
                return y[0]
        return None

    def run_chunk(self, start: int, stop: int) -> _ChunkOut:
        P = stop - start
        gens = [np.random.Generator(np.random.Philox(key=[self.cfg.seed, p])) for p in range(start, stop)]
        X = self.X0[start:stop].copy()
        if np.any(self.domain.distance(X) <= 0):
            raise ViableMFGError("initial points must lie strictly inside the domain")
        alive = np.ones(P, dtype=bool)
        exit_time = np.full(P, np.inf)
        d = self.domain.distance(X)
        min_d = d.copy()
        V0 = self._V(X)
        V_sum = np.zeros(len(self.sample_steps))
        slope_terms = np.zeros(P)
        X_samples = np.empty((len(self.sample_steps), P, self.dim)) if self.store else np.empty((0, P, self.dim))
        sample_pos = {int(s): i for i, s in enumerate(self.sample_steps)}

        def record(step_done, X):
            i = sample_pos.get(step_done)
            if i is None:
                return
            V = self._V(X)
            V_sum[i] = V.sum()
            slope_terms[:] += self._slope_w[i] * (V - V0)
            if self.store:
                X_samples[i] = X

        record(0, X)
        B = self.cfg.block_steps
        for b0 in range(0, self.n_steps, B):
            nb = min(B, self.n_steps - b0)
            Zb = np.empty((P, nb, self.dim))
            for g, z in zip(gens, Zb):
                g.standard_normal(out=z)
            for j in range(nb):
                step = b0 + j
                Xn = self._step(step * self.dt, X, Zb[:, j], self.dt)
                dn = self.domain.distance(Xn)
                bad = np.flatnonzero(alive & (dn <= 0))
                for i in bad:
                    y = self._retry(start + i, step, X[i])
                    if y is None:
                        alive[i] = False
                        exit_time[i] = (step + 1) * self.dt
                    else:
                        Xn[i] = y
                        dn[i] = self.domain.distance(y[None])[0]
                if alive.all():
                    X = Xn
                else:
                    X = np.where(alive[:, None], Xn, X)
                    dn = np.where(alive, dn, d)
                d = dn
                np.minimum(min_d, d, out=min_d)
                record(step + 1, X)
        return _ChunkOut(X_samples, ~alive, exit_time, min_d, V_sum, slope_terms)


def simulate(domain: DomainSpec, sigma, drift, x0, T: float, config: SDEConfig,
             store_paths: bool = False) -> SimulationResult:
    """Simulate ``config.n_paths`` paths on [0, T] and assemble viability statistics.

    ``sigma`` is a DiffusionField, a callable x -> (n, N, N) or a constant;
    ``drift`` is a callable (t, x) -> (n, N) or a constant vector.
    """
    X0 = _initial_points(x0, config.n_paths, domain.dim, config.seed)
    sim = _Simulator(domain, sigma, drift, X0, T, config, store_paths)
    bounds = [(s, min(s + config.chunk_paths, config.n_paths)) for s in range(0, config.n_paths, config.chunk_paths)]
    if config.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            outs = list(pool.map(lambda b: sim.run_chunk(*b), bounds))
    else:
        outs = [sim.run_chunk(*b) for b in bounds]

    n = config.n_paths
    exited = np.concatenate([o.exited for o in outs])
    frac = float(exited.mean())
    min_d = np.concatenate([o.min_d for o in outs])
    slope_p = np.concatenate([o.slope_terms for o in outs])
    mean_V = sum(o.V_sum for o in outs) / n
    se = float(slope_p.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    stats = ViabilityStats(
        exit_fraction=frac,
        exit_se=float(np.sqrt(frac * (1 - frac) / n)),
        min_distance_quantiles=tuple(float(q) for q in np.quantile(min_d, QUANTILES)),
        lyapunov_slope=float(slope_p.mean()),
        lyapunov_se=se,
        sample_times=sim.sample_times,
        mean_V=mean_V,
        n_paths=n,
        dt=sim.dt,
    )
    paths = None
    if store_paths:
        paths = PathStore(sim.sample_times, np.concatenate([o.X_samples for o in outs], axis=1), exited,
                          np.concatenate([o.exit_time for o in outs]))
    logger.info("simulated %d paths, dt=%g, exit fraction %.4f", n, sim.dt, frac)
    return SimulationResult(stats, paths)


def sweep_dt(domain: DomainSpec, sigma, drift, x0, T: float, config: SDEConfig, dts) -> ViabilityStats:
    """Run ``simulate`` for each dt; the last run's stats carry the full table."""
    table = []
    last = None
    for dt in dts:
        cfg = SDEConfig(**{**config.__dict__, "dt": float(dt)})
        last = simulate(domain, sigma, drift, x0, T, cfg).stats
        table.append({"dt": float(dt), "exit_fraction": last.exit_fraction, "exit_se": last.exit_se,
                      "lyapunov_slope": last.lyapunov_slope})
    last.table = table
    return last


# ---------------------------------------------------------------------------
# diagnostics on stored paths


@dataclass
class LyapunovReport:
    sample_times: np.ndarray
    mean_V: np.ndarray
    slope: float
    se: float
    C_expected: float
    blow_up: bool
    exit_fraction: float

    @property
    def passed(self) -> bool:
        return not self.blow_up and self.slope <= self.C_expected + 2 * self.se

    def summary(self) -> dict:
        return {"slope": self.slope, "se": self.se, "C_expected": self.C_expected, "blow_up": self.blow_up,
                "exit_fraction": self.exit_fraction, "passed": self.passed}


def lyapunov_check(paths: PathStore | None, domain: DomainSpec, C_expected: float,
                   exit_tol: float = 0.05) -> LyapunovReport:
    """Fit E[-log d(X_{s^tau})] - (-log d(X_0)) = C s through the origin.

    Exited paths stop at their last interior state, so V stays finite; the
    report flags blow-up when more than ``exit_tol`` of the paths exited,
    which is where V would have diverged for the exact dynamics.
    """
    if paths is None:
        raise NoStoredPaths("lyapunov_check needs stored paths (store_paths=True)")
    s = paths.times
    V = -np.log(np.maximum(np.stack([domain.distance(x) for x in paths.X]), np.finfo(float).tiny))
    w = s / np.sum(s * s) if np.any(s > 0) else np.zeros_like(s)
    per_path = w @ (V - V[0])
    n = paths.n_paths
    se = float(per_path.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    frac = float(paths.exited.mean())
    blow = frac > exit_tol or not np.all(np.isfinite(V))
    return LyapunovReport(s, V.mean(axis=1), float(per_path.mean()), se, float(C_expected), blow, frac)


def empirical_density(paths: PathStore | None, mesh: MaskedGrid, t: float) -> DensityField:
    """Histogram of surviving paths at the stored sample nearest to t.

    Normalised by n_paths h^N, so exited paths and paths outside the mask show
    up as ``metadata["missing_mass"]``.
    """
    if paths is None:
        raise NoStoredPaths("empirical_density needs stored paths")
    i = int(np.argmin(np.abs(paths.times - t)))
    if abs(paths.times[i] - t) > 1e-9 * max(1.0, abs(t)) + 0.5 * np.min(np.diff(paths.times), initial=np.inf):
        raise ViableMFGError(f"no stored sample near t = {t}")
    X = paths.X[i][~paths.exited]
    g = mesh.grid
    idx = np.floor((X - g.lower) / g.h).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(g.shape)), axis=1)
    flat = np.ravel_multi_index(tuple(idx[inside].T), g.shape)
    counts = np.bincount(flat, minlength=g.size)[mesh.mask].astype(float)
    vals = counts / (paths.n_paths * mesh.cell_volume)
    missing = 1.0 - vals.sum() * mesh.cell_volume
    return DensityField(mesh, np.array([paths.times[i]]), vals[None, :], {"missing_mass": float(missing)})


# ---------------------------------------------------------------------------
# feedback drift


class FeedbackDrift:
    """drift(s, x) = -Hp(s, x, Du(s, x)) (optionally - b~), Du interpolated linearly in space.

    Slice n + 1 of u is used on [t_n, t_{n+1}), matching the transport of the
    discrete FP step.  Points outside the hull of active cell centres are
    clamped onto it.
    """

    def __init__(self, u: SpaceTimeField, model: HamiltonianModel, a: DiffusionField | None = None,
                 include_btilde: bool = False):
        if include_btilde and a is None:
            raise ValueError("include_btilde needs the diffusion field")
        self.u = u
        self.model = model
        self.a = a
        self.include_btilde = include_btilde
        mesh = u.mesh
        g = mesh.grid
        self._axes = [g.lower[k] + (np.arange(n) + 0.5) * g.h for k, n in enumerate(g.shape)]
        self._lo = mesh.centers.min(axis=0)
        self._hi = mesh.centers.max(axis=0)
        mask_full = mesh.mask.reshape(g.shape)
        _, nearest = distance_transform_edt(~mask_full, return_indices=True)
        self._fill = np.ravel_multi_index(tuple(nearest), g.shape)
        self._cache: dict[int, RegularGridInterpolator] = {}
        self._warned = False

    def _interp(self, n: int) -> RegularGridInterpolator:
        if n not in self._cache:
            mesh = self.u.mesh
            grad = cell_gradient(mesh, self.u.values[n])
            full = np.zeros((mesh.grid.size, mesh.dim))
            full[mesh.mask] = grad
            full = full[self._fill].reshape(mesh.grid.shape + (mesh.dim,))
            self._cache[n] = RegularGridInterpolator(self._axes, full, bounds_error=False, fill_value=None)
        return self._cache[n]

    def gradient(self, t: float, x) -> np.ndarray:
        x = as_points(x, self.u.mesh.dim)
        h = self.u.mesh.h
        if not self._warned and (np.any(x < self._lo - h / 2) or np.any(x > self._hi + h / 2)):
            logger.warning("points beyond the mask hull are clamped onto it")
            self._warned = True
        xc = np.clip(x, self._lo, self._hi)
        dt = self.u.dt
        n = int(np.clip(np.floor(t / dt + 1e-9) + 1, 1, self.u.n_steps)) if dt > 0 else 0
        return self._interp(n)(xc)

    def __call__(self, t: float, x) -> np.ndarray:
        x = as_points(x, self.u.mesh.dim)
        v = -self.model.Hp(t, x, self.gradient(t, x))
        if self.include_btilde:
            v = v - divergence_drift(self.a, x)
        return v


def feedback_drift(u: SpaceTimeField, model: HamiltonianModel, a: DiffusionField | None = None,
                   include_btilde: bool = False) -> FeedbackDrift:
    return FeedbackDrift(u, model, a, include_btilde)


# ---------------------------------------------------------------------------
# paths file


def write_paths(path, store: PathStore) -> None:
    """Header, exit flags, then float64 records (path_id, t, x_1..x_N) per sample."""
    n_s, n_p, dim = store.X.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sBII", PATHS_MAGIC, dim, n_p, n_s))
        fh.write(store.exited.astype(np.uint8).tobytes())
        fh.write(np.asarray(store.exit_time, dtype="<f8").tobytes())
        ids = np.broadcast_to(np.arange(n_p, dtype=float)[None, :], (n_s, n_p))
        ts = np.broadcast_to(store.times[:, None], (n_s, n_p))
        rec = np.concatenate([ids[..., None], ts[..., None], store.X], axis=2)
        fh.write(np.ascontiguousarray(rec.transpose(1, 0, 2), dtype="<f8").tobytes())


def read_paths(path) -> PathStore:
    data = Path(path).read_bytes()
    magic, dim, n_p, n_s = struct.unpack_from("<8sBII", data, 0)
    if magic != PATHS_MAGIC:
        raise ViableMFGError(f"{path}: not a paths file")
    off = struct.calcsize("<8sBII")
    exited = np.frombuffer(data, dtype=np.uint8, count=n_p, offset=off).astype(bool)
    off += n_p
    exit_time = np.frombuffer(data, dtype="<f8", count=n_p, offset=off).copy()
    off += 8 * n_p
    rec = np.frombuffer(data, dtype="<f8", offset=off).reshape(n_p, n_s, 2 + dim)
    return PathStore(rec[0, :, 1].copy(), rec[:, :, 2:].transpose(1, 0, 2).copy(), exited, exit_time)
