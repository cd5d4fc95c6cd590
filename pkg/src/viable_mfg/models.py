"""Diffusion matrices, Hamiltonians and coupling operators.

Evaluators are vectorised over sample points: ``x`` has shape (n, N), ``p``
has shape (n, N) and ``t`` is a scalar.  ``H`` returns shape (n,) and ``Hp``
returns shape (n, N).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import GrowthViolation, ModelError, NonConvexCost
from .geometry import DomainSpec, as_points, signed_distance

logger = logging.getLogger(__name__)

Array = np.ndarray


# ---------------------------------------------------------------------------
# diffusion


@dataclass(frozen=True)
class DiffusionField:
    a: Callable[[Array], Array]
    dim: int
    sigma: Callable[[Array], Array] | None = None
    div: Callable[[Array], Array] | None = None
    lipschitz_const: float = np.nan
    name: str = "custom"

    def __call__(self, x) -> Array:
        return self.a(as_points(x, self.dim))

    def ellipticity(self, domain: DomainSpec, r: float, n_samples: int = 2000, seed: int = 0) -> float:
        """Sampled lower bound of the smallest eigenvalue of a on {d >= 1/r}."""
        rng = np.random.default_rng(seed)
        lo, hi = domain.bounding_box
        x = lo + (hi - lo) * rng.random((n_samples, self.dim))
        x = x[domain.distance(x) >= 1.0 / r]
        if len(x) == 0:
            return np.nan
        return float(np.linalg.eigvalsh(self(x)).min())

    def is_diagonal(self, x, tol: float = 1e-14) -> bool:
        a = self(x)
        off = a - np.einsum("nii->ni", a)[:, :, None] * np.eye(self.dim)[None]
        return bool(np.all(np.abs(off) <= tol))


def constant_diffusion(value: float, dim: int = 1) -> DiffusionField:
    if value < 0:
        raise ModelError("diffusion coefficient must be nonnegative")
    eye = np.eye(dim)
    return DiffusionField(
        a=lambda x: np.broadcast_to(value * eye, (len(x), dim, dim)).copy(),
        dim=dim,
        sigma=lambda x: np.broadcast_to(np.sqrt(value) * eye, (len(x), dim, dim)).copy(),
        div=lambda x: np.zeros((len(x), dim)),
        lipschitz_const=0.0,
        name="constant",
    )


def wright_fisher_diffusion(lower=(0.0,), upper=(1.0,), scale: float = 1.0) -> DiffusionField:
    """a = diag(scale (x_k - lo_k)(hi_k - x_k) / (hi_k - lo_k)): degenerate normal to each face."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    width = hi - lo
    dim = len(lo)

    def diag(x):
        return scale * (x - lo) * (hi - x) / width

    def a(x):
        return diag(x)[:, :, None] * np.eye(dim)[None]

    def sigma(x):
        s = np.sqrt(np.maximum(diag(x), 0.0))
        return s[:, :, None] if dim == 1 else s[:, :, None] * np.eye(dim)[None]

    def div(x):
        return scale * (lo + hi - 2 * x) / width

    return DiffusionField(a, dim, sigma, div, lipschitz_const=float(abs(scale)), name="wright_fisher")


def radial_diffusion(center=(0.0, 0.0), radius: float = 1.0, scale: float = 1.0) -> DiffusionField:
    """a = scale (R^2 - |x-c|^2)/R I, vanishing on the sphere |x-c| = R."""
    c = np.asarray(center, dtype=float)
    dim = len(c)

    def coef(x):
        return scale * (radius**2 - np.sum((x - c) ** 2, axis=1)) / radius

    return DiffusionField(
        a=lambda x: coef(x)[:, None, None] * np.eye(dim)[None],
        dim=dim,
        sigma=lambda x: np.sqrt(np.maximum(coef(x), 0.0))[:, None, None] * np.eye(dim)[None],
        div=lambda x: -2 * scale * (x - c) / radius,
        lipschitz_const=2 * scale,
        name="radial",
    )


def divergence_drift(a: DiffusionField, x, step: float = 1e-6) -> Array:
    """Column divergence of a: tilde_b_j = sum_i d a_ij / d x_i."""
    x = as_points(x, a.dim)
    if a.div is not None:
        return np.asarray(a.div(x), dtype=float)
    out = np.zeros_like(x)
    for i in range(a.dim):
        e = np.zeros(a.dim)
        e[i] = step
        out += (a(x + e)[:, i, :] - a(x - e)[:, i, :]) / (2 * step)
    return out


# ---------------------------------------------------------------------------
# Hamiltonians


@dataclass(frozen=True)
class GrowthRecord:
    kind: str = "bounded"  # bounded Hp | power (|Hp| <= C (1 + |p|^(q'-1)))
    constant: float | None = None
    q_prime: float | None = None
    quadratic: bool = True


@dataclass(frozen=True)
class HamiltonianModel:
    H: Callable[[float, Array, Array], Array]
    Hp: Callable[[float, Array, Array], Array]
    dim: int
    h0_bound: float = 0.0
    growth: GrowthRecord = field(default_factory=GrowthRecord)
    convex_in_p: bool = True
    hx_lower: float | None = None
    name: str = "custom"
    control: Callable[[float, Array, Array], Array] | None = None
    meta: dict = field(default_factory=dict)

    def bregman(self, t, x, q, p) -> Array:
        """E(q, p) = H(q) - H(p) - Hp(p).(q - p); nonnegative for convex H."""
        return self.H(t, x, q) - self.H(t, x, p) - np.sum(self.Hp(t, x, p) * (q - p), axis=1)


def quadratic_hamiltonian(dim: int = 1, weight: float = 0.5) -> HamiltonianModel:
    """H = weight |p|^2."""
    return HamiltonianModel(
        H=lambda t, x, p: weight * np.sum(p * p, axis=1),
        Hp=lambda t, x, p: 2 * weight * p,
        dim=dim,
        h0_bound=0.0,
        growth=GrowthRecord("power", 2 * weight, 2.0, True),
        name="quadratic",
    )


def linear_hamiltonian(velocity: Callable[[float, Array], Array], dim: int, bound: float | None = None) -> HamiltonianModel:
    """H = -v(t, x).p, i.e. uncontrolled dynamics with drift v."""
    return HamiltonianModel(
        H=lambda t, x, p: -np.sum(velocity(t, x) * p, axis=1),
        Hp=lambda t, x, p: -np.asarray(velocity(t, x), dtype=float) * np.ones_like(p),
        dim=dim,
        h0_bound=0.0,
        growth=GrowthRecord("bounded", bound, None, True),
        name="linear",
    )


@dataclass(frozen=True)
class RunningCost:
    """Control cost L(x, alpha); ``quadratic`` marks L = |alpha|^2 / 2."""

    value: Callable[[Array, Array], Array]
    grad_alpha: Callable[[Array, Array], Array] | None = None
    quadratic: bool = False

    @classmethod
    def half_square(cls) -> "RunningCost":
        return cls(lambda x, al: 0.5 * np.sum(al * al, axis=1), lambda x, al: al, True)


def _fd_grad_alpha(L: RunningCost, x, al, step=1e-6):
    if L.grad_alpha is not None:
        return L.grad_alpha(x, al)
    g = np.zeros_like(al)
    for k in range(al.shape[1]):
        e = np.zeros(al.shape[1])
        e[k] = step
        g[:, k] = (L.value(x, al + e) - L.value(x, al - e)) / (2 * step)
    return g


def _check_strict_convexity(L: RunningCost, domain: DomainSpec, radius: float, n: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    dim = domain.dim
    lo, hi = domain.bounding_box
    x = lo + (hi - lo) * rng.random((n, dim))
    al = rng.normal(size=(n, dim))
    al *= (radius * rng.random(n) / np.maximum(np.linalg.norm(al, axis=1), 1e-12))[:, None]
    step = 1e-4
    hess = np.zeros((n, dim, dim))
    for i in range(dim):
        ei = np.zeros(dim)
        ei[i] = step
        hess[:, i, :] = (_fd_grad_alpha(L, x, al + ei) - _fd_grad_alpha(L, x, al - ei)) / (2 * step)
    hess = 0.5 * (hess + hess.transpose(0, 2, 1))
    lam = np.linalg.eigvalsh(hess).min()
    if lam < -1e-8:
        raise NonConvexCost(f"running cost has negative Hessian eigenvalue {lam:.3g}")
    return hess


def example1_hamiltonian(M: float, control_radius: float, L: RunningCost | None, domain: DomainSpec,
                         iterations: int = 50, tol: float = 1e-10) -> HamiltonianModel:
    """Bounded controls in a ball, drift b(x, a) = M Dd(x) + a.

    H(x, p) = sup_{|a| <= R} (-a.p - M Dd.p - L(x, a)),  Hp = -M Dd - a*.
    """
    if M < 0 or control_radius <= 0:
        raise ModelError("need M >= 0 and a positive control radius")
    L = RunningCost.half_square() if L is None else L
    R = control_radius
    if not L.quadratic:
        hess = _check_strict_convexity(L, domain, R)
        curv = max(float(np.linalg.eigvalsh(hess).max()), 1e-8)
    dim = domain.dim

    def project(al):
        nrm = np.linalg.norm(al, axis=1, keepdims=True)
        return np.where(nrm > R, al * (R / np.maximum(nrm, 1e-300)), al)

    def argmax(t, x, p):
        x = as_points(x, dim)
        p = np.asarray(p, dtype=float).reshape(len(x), dim)
        if L.quadratic:
            return project(-p)
        al = project(-p)
        step = 1.0 / (1.5 * curv)
        for _ in range(iterations):
            new = project(al + step * (-p - _fd_grad_alpha(L, x, al)))
            done = np.max(np.abs(new - al)) < tol
            al = new
            if done:
                break
        return al

    def H(t, x, p):
        x = as_points(x, dim)
        p = np.asarray(p, dtype=float).reshape(len(x), dim)
        dd = signed_distance(domain, x)[1]
        al = argmax(t, x, p)
        return -np.sum(al * p, axis=1) - M * np.sum(dd * p, axis=1) - L.value(x, al)

    def Hp(t, x, p):
        x = as_points(x, dim)
        p = np.asarray(p, dtype=float).reshape(len(x), dim)
        dd = signed_distance(domain, x)[1]
        return -M * dd - argmax(t, x, p)

    return HamiltonianModel(
        H, Hp, dim,
        h0_bound=0.0,
        growth=GrowthRecord("bounded", M + R, None, True),
        name="example1",
        control=argmax,
        meta={"M": M, "control_radius": R},
    )


def example2_hamiltonian(M: float, eta: float, q: float, c0: float, domain: DomainSpec,
                         require_quadratic: bool = False) -> HamiltonianModel:
    """Cone controls a_i >= 0, B(x) = diag(Dd), L = eta |a|^q.

    The supremum over the cone is attained along the positive part of
    w = -Dd * p with radius r = (|w+| / (q eta))^(1/(q-1)).
    """
    if q <= 1 or eta <= 0:
        raise ModelError("need q > 1 and eta > 0")
    if require_quadratic and q < 2:
        raise GrowthViolation(f"q={q} < 2 gives superquadratic growth in p")
    dim = domain.dim
    q_prime = q / (q - 1)

    def argmax(t, x, p):
        x = as_points(x, dim)
        p = np.asarray(p, dtype=float).reshape(len(x), dim)
        dd = signed_distance(domain, x)[1]
        w = np.maximum(-dd * p, 0.0)
        s = np.linalg.norm(w, axis=1)
        r = (s / (q * eta)) ** (1.0 / (q - 1))
        return w * (r / np.where(s > 0, s, 1.0))[:, None]

    def H(t, x, p):
        x = as_points(x, dim)
        p = np.asarray(p, dtype=float).reshape(len(x), dim)
        dd = signed_distance(domain, x)[1]
        w = np.maximum(-dd * p, 0.0)
        s = np.linalg.norm(w, axis=1)
        r = (s / (q * eta)) ** (1.0 / (q - 1))
        return -M * np.sum(dd * p, axis=1) + (1 - 1 / q) * s * r

    def Hp(t, x, p):
        x = as_points(x, dim)
        dd = signed_distance(domain, x)[1]
        return -M * dd - dd * argmax(t, x, p)

    cst = max(M, 1.0) + (1.0 / (q * eta)) ** (1.0 / (q - 1))
    return HamiltonianModel(
        H, Hp, dim,
        h0_bound=0.0,
        growth=GrowthRecord("power", cst, q_prime, q >= 2),
        name="example2",
        control=argmax,
        meta={"M": M, "eta": eta, "q": q, "c0": c0},
    )


def truncate_hamiltonian(model: HamiltonianModel, eps: float) -> HamiltonianModel:
    """Clamp H to [-1/eps, 1/eps]; Hp is set to 0 where the clamp is active."""
    if eps <= 0:
        raise ModelError("truncation level needs eps > 0")
    level = 1.0 / eps

    def H(t, x, p):
        return np.clip(model.H(t, x, p), -level, level)

    def Hp(t, x, p):
        raw = model.H(t, x, p)
        g = model.Hp(t, x, p)
        return np.where((np.abs(raw) > level)[:, None], 0.0, g)

    return replace(model, H=H, Hp=Hp, name=f"{model.name}|trunc({eps:g})", h0_bound=min(model.h0_bound, level))


def hamiltonian_from_config(block: dict, domain: DomainSpec) -> HamiltonianModel:
    kind = block["type"]
    if kind == "quadratic":
        return quadratic_hamiltonian(domain.dim, block.get("weight", 0.5))
    if kind == "example1":
        return example1_hamiltonian(block.get("M", 1.0), block.get("control_radius", 1.0), None, domain)
    if kind == "example2":
        return example2_hamiltonian(block.get("M", 1.0), block.get("eta", 0.5), block.get("q", 2.0),
                                    block.get("c0", 0.0), domain, block.get("quadratic_guard", False))
    if kind == "inward":
        M = block.get("M", 1.0)
        return linear_hamiltonian(lambda t, x: M * signed_distance(domain, x)[1], domain.dim, abs(M))
    raise ModelError(f"unknown hamiltonian type {kind!r}")


def diffusion_from_config(block: dict, domain: DomainSpec) -> DiffusionField:
    kind = block["kind"]
    scale = block.get("scale", 1.0)
    if kind == "constant":
        return constant_diffusion(scale, domain.dim)
    if kind == "zero":
        return constant_diffusion(0.0, domain.dim)
    if kind == "wright_fisher":
        lo, hi = domain.bounding_box
        return wright_fisher_diffusion(lo, hi, scale)
    if kind == "radial":
        lo, hi = domain.bounding_box
        return radial_diffusion((lo + hi) / 2, float((hi - lo)[0] / 2), scale)
    raise ModelError(f"unknown diffusion kind {kind!r}")


# ---------------------------------------------------------------------------
# couplings


@dataclass(frozen=True)
class CouplingF:
    """Running coupling F(t, x, m) acting slice by slice.

    ``evaluate(t, mesh, m)`` returns values on the active cells of ``mesh``.
    """

    mode: str
    evaluate: Callable
    sup_bound: float = np.inf
    monotone: bool = True
    lipschitz_in_x: float | None = None
    name: str = "custom"
    depends_on_m: bool = True

    def path(self, times, mesh, m_values: Array) -> Array:
        return np.stack([self.evaluate(t, mesh, m) for t, m in zip(times, m_values)])


@dataclass(frozen=True)
class CouplingG:
    mode: str
    evaluate: Callable
    w1inf_bound: float = np.inf
    monotone: bool = True
    name: str = "custom"
    depends_on_m: bool = True


def _convolution_matrix(mesh, kernel):
    x = mesh.centers
    diff = x[:, None, :] - x[None, :, :]
    return kernel(diff.reshape(-1, x.shape[1])).reshape(len(x), len(x)) * mesh.cell_volume


def _gaussian_kernel(width):
    return lambda z: np.exp(-np.sum(z * z, axis=1) / (2 * width**2))


class _ConvolutionCache:
    def __init__(self, kernel):
        self.kernel = kernel
        self._cache = {}

    def __call__(self, mesh, m):
        key = id(mesh)
        if key not in self._cache:
            self._cache[key] = (mesh, _convolution_matrix(mesh, self.kernel))
        return self._cache[key][1] @ m


def coupling_F_from_config(block: dict | None) -> CouplingF:
    block = block or {"mode": "local", "kind": "zero"}
    mode = block.get("mode", "local")
    kind = block.get("kind", "zero")
    scale = block.get("scale", 1.0)
    if mode == "convolution":
        conv = _ConvolutionCache(_gaussian_kernel(block.get("width", 0.1)))
        return CouplingF("convolution", lambda t, mesh, m: scale * conv(mesh, m),
                         sup_bound=np.inf, monotone=scale >= 0, name="gaussian")
    if kind == "zero":
        return CouplingF("local", lambda t, mesh, m: np.zeros(mesh.n), 0.0, True, 0.0, "zero", False)
    if kind == "constant":
        v = block.get("value", 1.0)
        return CouplingF("local", lambda t, mesh, m: np.full(mesh.n, float(v)), abs(v), True, 0.0, "constant", False)
    if kind == "linear":
        return CouplingF("local", lambda t, mesh, m: scale * m, np.inf, scale >= 0, 0.0, "linear")
    if kind == "saturating":
        return CouplingF("local", lambda t, mesh, m: scale * m / (1.0 + np.abs(m)), abs(scale), scale >= 0, 0.0,
                         "saturating")
    raise ModelError(f"unknown coupling_F kind {kind!r}")


def coupling_G_from_config(block: dict | None) -> CouplingG:
    block = block or {"mode": "local", "kind": "zero"}
    mode = block.get("mode", "local")
    kind = block.get("kind", "zero")
    scale = block.get("scale", 1.0)
    if mode == "convolution":
        conv = _ConvolutionCache(_gaussian_kernel(block.get("width", 0.1)))
        return CouplingG("convolution", lambda mesh, m: scale * conv(mesh, m), np.inf, scale >= 0, "gaussian")
    if kind == "zero":
        return CouplingG("local", lambda mesh, m: np.zeros(mesh.n), 0.0, True, "zero", False)
    if kind == "constant":
        v = float(block.get("value", 0.0))
        return CouplingG("local", lambda mesh, m: np.full(mesh.n, v), abs(v), True, "constant", False)
    if kind == "affine":
        c0 = float(block.get("value", 0.0))
        w = np.asarray(block.get("slope", [1.0]), dtype=float)
        return CouplingG("local", lambda mesh, m: c0 + mesh.centers @ w, np.inf, True, "affine", False)
    if kind == "cosine":
        amp = float(block.get("value", 1.0))
        return CouplingG("local", lambda mesh, m: amp * np.cos(2 * np.pi * mesh.centers).prod(axis=1),
                         abs(amp) * (1 + 2 * np.pi), True, "cosine", False)
    if kind == "linear":
        return CouplingG("local", lambda mesh, m: scale * m, np.inf, scale >= 0, "linear")
    raise ModelError(f"unknown coupling_G kind {kind!r}")


# ---------------------------------------------------------------------------
# structural checks


@dataclass
class StructureReport:
    checks: dict
    violations: dict

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks.values())


def _default_p_samples(dim, magnitudes, n_dirs=8):
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        th = 2 * np.pi * np.arange(n_dirs) / n_dirs
        dirs = np.zeros((n_dirs, dim))
        dirs[:, 0], dirs[:, 1] = np.cos(th), np.sin(th)
    return [(r, r * dirs) for r in magnitudes]


def check_structure(model: HamiltonianModel, a: DiffusionField | None, x_samples, t_samples=(0.0,),
                    p_magnitudes=(0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0), quadratic_guard: bool = True,
                    fd_step: float = 1e-5) -> StructureReport:
    """Sampled verification of the standing assumptions on H (and a)."""
    x_samples = as_points(x_samples, model.dim)
    nx = len(x_samples)
    levels = _default_p_samples(model.dim, p_magnitudes)
    checks, viol = {}, {}

    def tiled(P):
        return np.repeat(x_samples, len(P), axis=0), np.tile(P, (nx, 1))

    h0 = 0.0
    lin_by_level, quad_by_level = [], []
    fd_err, convex_min, breg_min, hx_ratio = 0.0, np.inf, np.inf, -np.inf
    viol["convex"], viol["quadgrow"] = [], []
    for t in t_samples:
        h0 = max(h0, float(np.max(np.abs(model.H(t, x_samples, np.zeros_like(x_samples))))))
        for r, P in levels:
            X, Pt = tiled(P)
            Hv = model.H(t, X, Pt)
            G = model.Hp(t, X, Pt)
            lin_by_level.append((r, float(np.max(np.linalg.norm(G, axis=1) / (1 + r)))))
            quad_by_level.append((r, float(np.max(np.abs(Hv) / (1 + r * r)))))
            # finite-difference consistency of Hp (step relative to |p|)
            step = fd_step * max(1.0, r)
            fd = np.zeros_like(Pt)
            for k in range(model.dim):
                e = np.zeros(model.dim)
                e[k] = step
                fd[:, k] = (model.H(t, X, Pt + e) - model.H(t, X, Pt - e)) / (2 * step)
            smooth = np.abs(Hv) < 1e12
            if np.any(smooth):
                fd_err = max(fd_err, float(np.max(np.abs(fd - G)[smooth]) / max(1.0, r)))
            # H_x . p lower bound
            hx = np.zeros_like(Pt)
            for k in range(model.dim):
                e = np.zeros(model.dim)
                e[k] = fd_step
                hx[:, k] = (model.H(t, X + e, Pt) - model.H(t, X - e, Pt)) / (2 * fd_step)
            hx_ratio = max(hx_ratio, float(np.max(-np.sum(hx * Pt, axis=1) / (1 + r * r))))
        # midpoint convexity and Bregman sign over pairs of levels
        allP = np.vstack([P for _, P in levels])
        rng = np.random.default_rng(0)
        i1 = rng.integers(0, len(allP), 64)
        i2 = rng.integers(0, len(allP), 64)
        for xi in x_samples:
            X = np.broadcast_to(xi, (64, model.dim))
            p, q = allP[i1], allP[i2]
            gap = 0.5 * (model.H(t, X, p) + model.H(t, X, q)) - model.H(t, X, 0.5 * (p + q))
            scale = 1.0 + np.abs(model.H(t, X, p)) + np.abs(model.H(t, X, q))
            rel = gap / scale
            convex_min = min(convex_min, float(rel.min()))
            if rel.min() < -1e-10:
                viol["convex"].append((t, xi.tolist()))
            breg_min = min(breg_min, float((model.bregman(t, X, q, p) / scale).min()))

    def unbounded(series):
        by = {}
        for r, v in series:
            by[r] = max(by.get(r, 0.0), v)
        rs = sorted(by)
        if len(rs) < 2 or rs[-1] == 0:
            return False, by
        return by[rs[-1]] > 1.5 * max(by[rs[-2]], 1e-300) and by[rs[-1]] > 1e-12, by

    lin_unb, lin_by = unbounded(lin_by_level)
    quad_unb, quad_by = unbounded(quad_by_level)
    c_lin = max(lin_by.values())
    c_quad = max(quad_by.values())
    declared = model.growth.constant
    checks["H0"] = {"pass": h0 <= model.h0_bound + 1e-10, "value": h0}
    checks["linder"] = {
        "pass": (not lin_unb) and (declared is None or model.growth.kind != "bounded" or c_lin <= declared + 1e-9),
        "value": c_lin,
        "by_level": lin_by,
    }
    checks["quadgrow"] = {"pass": (not quad_unb) or not quadratic_guard, "value": c_quad, "by_level": quad_by}
    if quad_unb:
        viol["quadgrow"] = [r for r in quad_by if quad_by[r] == c_quad]
    checks["convex"] = {"pass": (not model.convex_in_p) or convex_min >= -1e-10, "value": convex_min}
    checks["bregman"] = {"pass": (not model.convex_in_p) or breg_min >= -1e-10, "value": breg_min}
    checks["Hp_consistency"] = {"pass": fd_err <= 1e-4, "value": fd_err}
    checks["Hx"] = {"pass": np.isfinite(hx_ratio) and hx_ratio < 1e6, "value": hx_ratio}
    if a is not None:
        A = a(x_samples)
        sym = float(np.max(np.abs(A - A.transpose(0, 2, 1))))
        lam = float(np.linalg.eigvalsh(0.5 * (A + A.transpose(0, 2, 1))).min())
        checks["deg"] = {"pass": sym <= 1e-12 and lam >= -1e-12, "value": lam}
        if a.sigma is not None:
            S = a.sigma(x_samples)
            err = float(np.max(np.abs(A - S @ S.transpose(0, 2, 1))))
            checks["sigma"] = {"pass": err <= 1e-12, "value": err}
    return StructureReport(checks, viol)
