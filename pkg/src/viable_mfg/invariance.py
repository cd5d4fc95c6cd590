"""Sampled certificates for the boundary invariance inequalities.

Every check evaluates a margin of the form

    tr(a D^2 d) + (drift term) - (a Dd . Dd) / d + C d

on points of the boundary layer ``{0 < d < delta}`` and reports its minimum
together with the smallest constant ``C`` that makes all sampled margins
nonnegative.  Layer points sit on geometric distance levels
``delta, delta/2, ..., delta/2**8`` because the inequality binds as d -> 0.

A pass is a statement about the samples only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import DomainSpec, as_points, build_barrier, signed_distance
from .models import DiffusionField, HamiltonianModel, divergence_drift

N_LEVELS = 9
P_RADII = (0.0, 1.0, 10.0, 100.0)
CAVEATS = (
    "sampled certificate: the inequality is only required almost everywhere and "
    "null sets cannot be distinguished by sampling",
)


@dataclass
class InvarianceReport:
    condition_id: str
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray | None
    distance: np.ndarray
    level: np.ndarray
    margin0: np.ndarray
    C: float
    fitted_C: float
    delta: float
    resolution: dict = field(default_factory=dict)
    caveats: tuple = CAVEATS

    @property
    def margins(self) -> np.ndarray:
        if not np.isfinite(self.C):
            return np.where(self.distance > 0, np.inf, self.margin0)
        return self.margin0 + self.C * self.distance

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins)) if len(self.margin0) else np.inf

    @property
    def verdict(self) -> str:
        return "pass" if np.isfinite(self.C) and self.min_margin >= -1e-12 else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def at(self, C: float) -> "InvarianceReport":
        """Same samples evaluated at another constant."""
        return InvarianceReport(self.condition_id, self.t, self.x, self.p, self.distance, self.level,
                                self.margin0, C, self.fitted_C, self.delta, self.resolution, self.caveats)

    def summary(self) -> dict:
        return {
            "condition_id": self.condition_id,
            "delta": self.delta,
            "C": _json_float(self.C),
            "fitted_C": _json_float(self.fitted_C),
            "min_margin": _json_float(self.min_margin),
            "verdict": self.verdict,
            "n_samples": int(len(self.margin0)),
            "resolution": self.resolution,
            "caveats": list(self.caveats),
        }

    def to_csv(self, path) -> None:
        dim = self.x.shape[1]
        cols = [self.t[:, None], self.x, self.distance[:, None], self.margin0[:, None], self.margins[:, None]]
        names = ["t"] + [f"x{k + 1}" for k in range(dim)] + ["d", "margin_C0", "margin"]
        if self.p is not None:
            cols.insert(2, self.p)
            names[1 + dim:1 + dim] = [f"p{k + 1}" for k in range(self.p.shape[1])]
        np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.12g")


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def fit_constant(margin0, distance, level=None, growth_ratio: float = 1.5) -> float:
    """Smallest C with margin0 + C d >= 0 on all samples, or +inf.

    ``+inf`` is returned when the required constant deficit/d grows
    monotonically (by ``growth_ratio``) across the three finest refinements
    of the distance levels, i.e. it diverges as d -> 0.
    """
    margin0 = np.asarray(margin0, dtype=float)
    distance = np.asarray(distance, dtype=float)
    if len(margin0) == 0:
        return 0.0
    need = np.maximum(0.0, -margin0) / distance
    if level is not None:
        level = np.asarray(level)
        levels = np.unique(level)
        if len(levels) >= 4:
            finest = levels[-4:]
            per = [need[level == k].max() for k in finest]
            if per[-1] > 0 and all(b >= growth_ratio * a and b > 0 for a, b in zip(per[:-1], per[1:])):
                return np.inf
    return float(need.max())


def _resolve(margin0, d, level, C):
    fitted = fit_constant(margin0, d, level)
    return (fitted if C is None or C == "auto" else float(C)), fitted


def _levels(delta):
    return delta / 2.0 ** np.arange(N_LEVELS)


def layer_samples(domain: DomainSpec, delta: float, n_tangential: int = 9, piece: int | None = None):
    """Layer points as (x, d, level) with d the distance to ``piece`` (or to the domain)."""
    if domain.kind == "generalized":
        return _tensor_layer_samples(domain, delta, n_tangential, piece)
    xs, ds, lv = [], [], []
    pieces = range(len(domain.pieces)) if piece is None else [piece]
    for i in pieces:
        xb, nrm = domain.pieces[i].boundary_sampler(n_tangential)
        for k, d in enumerate(_levels(delta)):
            x = xb + d * nrm
            xs.append(x)
            ds.append(np.full(len(x), d))
            lv.append(np.full(len(x), k))
    x = np.vstack(xs)
    d = np.concatenate(ds)
    level = np.concatenate(lv)
    # keep points whose domain distance is the sampled one (drops points past the medial axis)
    keep = np.abs(domain.distance(x) - d) <= 1e-9 * max(1.0, delta)
    return x[keep], d[keep], level[keep]


def _tensor_layer_samples(domain, delta, n_tangential, piece):
    lo, hi = domain.bounding_box
    axes = []
    for k in range(domain.dim):
        geo = np.concatenate([lo[k] + _levels(delta), hi[k] - _levels(delta)])
        uni = np.linspace(lo[k], hi[k], n_tangential + 2)[1:-1]
        axes.append(np.unique(np.concatenate([geo, uni])))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dim)
    dists = domain.piece_distances(mesh)
    inside = np.all(dists > 0, axis=1)
    d = dists[:, piece] if piece is not None else dists.min(axis=1)
    keep = inside & (d < delta * (1 + 1e-12))
    x, d = mesh[keep], d[keep]
    level = np.clip(np.round(np.log2(delta / d)), 0, N_LEVELS - 1).astype(int)
    return x, d, level


def default_p_samples(dim: int, radii=P_RADII, n_dirs: int = 8) -> np.ndarray:
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        th = 2 * np.pi * np.arange(n_dirs) / n_dirs
        dirs = np.zeros((n_dirs, dim))
        dirs[:, 0], dirs[:, 1] = np.cos(th), np.sin(th)
    out = [np.zeros((1, dim))] + [r * dirs for r in radii if r > 0]
    return np.vstack(out)


def _geometry_terms(a: DiffusionField, x, grad, hess, divergence_form: bool):
    A = a(x)
    tr = np.einsum("nij,nji->n", A, hess)
    if divergence_form:
        tr = tr + np.sum(divergence_drift(a, x) * grad, axis=1)
    normal = np.einsum("ni,nij,nj->n", grad, A, grad)
    return tr, normal


def _expand(x, d, level, ts, extra):
    """Cartesian product of layer points, times and per-point extra samples (n, m, k)."""
    n, m = extra.shape[0], extra.shape[1]
    X = np.repeat(np.repeat(x, m, axis=0)[None], len(ts), axis=0).reshape(-1, x.shape[1])
    D = np.tile(np.repeat(d, m), len(ts))
    L = np.tile(np.repeat(level, m), len(ts))
    E = np.tile(extra.reshape(n * m, -1), (len(ts), 1))
    T = np.repeat(np.asarray(ts, dtype=float), n * m)
    return T, X, D, L, E


def _p_candidates(x, grad, p_samples, radii=P_RADII):
    base = np.asarray(p_samples, dtype=float)
    n = len(x)
    fixed = np.broadcast_to(base, (n,) + base.shape)
    worst = [s * r * grad[:, None, :] for r in radii if r > 0 for s in (1.0, -1.0)]
    return np.concatenate([fixed] + worst, axis=1)


def check_hjb_invariance(domain: DomainSpec, a: DiffusionField, model: HamiltonianModel, delta: float,
                         C: float | str | None = "auto", p_samples=None, t_samples: Sequence[float] = (0.0,),
                         n_tangential: int = 9) -> InvarianceReport:
    """tr(a D^2 d) - Hp(t, x, p).Dd - (a Dd.Dd)/d + C d >= 0 on the layer, for all sampled p."""
    x, d, level = layer_samples(domain, delta, n_tangential)
    _, grad, hess, _ = signed_distance(domain, x)
    p_samples = default_p_samples(domain.dim) if p_samples is None else as_points(p_samples, domain.dim)
    P = _p_candidates(x, grad, p_samples)
    T, X, D, L, Pf = _expand(x, d, level, t_samples, P)
    _, G, Hs, _ = signed_distance(domain, X)
    tr, normal = _geometry_terms(a, X, G, Hs, False)
    drift = np.empty(len(X))
    for t in np.unique(T):
        sel = T == t
        drift[sel] = -np.sum(model.Hp(t, X[sel], Pf[sel]) * G[sel], axis=1)
    margin0 = tr + drift - normal / D
    C_used, fitted = _resolve(margin0, D, L, C)
    return InvarianceReport("hjb", T, X, Pf, D, L, margin0, C_used, fitted, delta,
                            {"levels": N_LEVELS, "n_points": len(x), "n_p": P.shape[1]})


def check_fp_invariance(domain: DomainSpec, a: DiffusionField, b: Callable, delta: float,
                        C: float | str | None = "auto", t_samples: Sequence[float] = (0.0,),
                        divergence_form: bool = False, n_tangential: int = 9) -> InvarianceReport:
    """Trace form: tr(a D^2 d) - b.Dd - (a Dd.Dd)/d + C d; divergence form uses div(a Dd)."""
    x, d, level = layer_samples(domain, delta, n_tangential)
    T, X, D, L, _ = _expand(x, d, level, t_samples, np.zeros((len(x), 1, 1)))
    _, G, Hs, _ = signed_distance(domain, X)
    tr, normal = _geometry_terms(a, X, G, Hs, divergence_form)
    drift = np.empty(len(X))
    for t in np.unique(T):
        sel = T == t
        drift[sel] = -np.sum(np.asarray(b(t, X[sel]), dtype=float) * G[sel], axis=1)
    margin0 = tr + drift - normal / D
    C_used, fitted = _resolve(margin0, D, L, C)
    cid = "fp_divergence" if divergence_form else "fp"
    return InvarianceReport(cid, T, X, None, D, L, margin0, C_used, fitted, delta,
                            {"levels": N_LEVELS, "n_points": len(x)})


def check_sde_invariance(domain: DomainSpec, sigma: Callable, b: Callable, delta: float,
                         C: float | str | None = "auto", alpha_samples=None,
                         t_samples: Sequence[float] = (0.0,), n_tangential: int = 9) -> InvarianceReport:
    """tr(a D^2 d) + b(s, x, alpha).Dd - (a Dd.Dd)/d + C d with a = sigma sigma^T (drift enters with +)."""
    x, d, level = layer_samples(domain, delta, n_tangential)
    alpha = np.zeros((1, 1)) if alpha_samples is None else np.atleast_2d(np.asarray(alpha_samples, dtype=float))
    if alpha.shape[0] == 1 and alpha.shape[1] > 1 and domain.dim == 1:
        alpha = alpha.T
    extra = np.broadcast_to(alpha, (len(x),) + alpha.shape)
    T, X, D, L, Af = _expand(x, d, level, t_samples, extra)
    _, G, Hs, _ = signed_distance(domain, X)
    S = sigma(X)
    A = S @ S.transpose(0, 2, 1)
    tr = np.einsum("nij,nji->n", A, Hs)
    normal = np.einsum("ni,nij,nj->n", G, A, G)
    drift = np.empty(len(X))
    for t in np.unique(T):
        sel = T == t
        drift[sel] = np.sum(np.asarray(b(t, X[sel], Af[sel]), dtype=float) * G[sel], axis=1)
    margin0 = tr + drift - normal / D
    C_used, fitted = _resolve(margin0, D, L, C)
    return InvarianceReport("sde", T, X, Af, D, L, margin0, C_used, fitted, delta,
                            {"levels": N_LEVELS, "n_points": len(x), "n_alpha": alpha.shape[0]})


def check_generalized(domain: DomainSpec, a: DiffusionField, model: HamiltonianModel, delta: float,
                      C: float | str | None = "auto", mode: str = "per_piece", p_samples=None,
                      t_samples: Sequence[float] = (0.0,), n_tangential: int = 9,
                      barrier_delta: float | None = None) -> InvarianceReport:
    """Invariance for an intersection of smooth pieces.

    ``per_piece`` checks the inequality for every d_i on its own layer;
    ``barrier`` checks it for psi = prod_i phi(d_i) on the union of layers.
    """
    p_samples = default_p_samples(domain.dim) if p_samples is None else as_points(p_samples, domain.dim)
    if mode == "per_piece":
        parts = []
        for i, piece in enumerate(domain.pieces):
            x, d, level = layer_samples(domain, delta, n_tangential, piece=i)
            if len(x) == 0:
                continue
            grad = piece.gradient(x)
            P = _p_candidates(x, grad, p_samples)
            T, X, D, L, Pf = _expand(x, d, level, t_samples, P)
            G, Hs = piece.gradient(X), piece.hessian(X)
            tr, normal = _geometry_terms(a, X, G, Hs, False)
            drift = np.empty(len(X))
            for t in np.unique(T):
                sel = T == t
                drift[sel] = -np.sum(model.Hp(t, X[sel], Pf[sel]) * G[sel], axis=1)
            parts.append((T, X, Pf, D, L, tr + drift - normal / D))
        T, X, Pf, D, L, m0 = (np.concatenate(z) for z in zip(*parts))
        C_used, fitted = _resolve(m0, D, L, C)
        return InvarianceReport("generalized_piecewise", T, X, Pf, D, L, m0, C_used, fitted, delta,
                                {"levels": N_LEVELS, "pieces": len(domain.pieces)})
    if mode != "barrier":
        raise ValueError(f"unknown mode {mode!r}")
    bw = delta if barrier_delta is None else barrier_delta
    barrier = build_barrier(domain, bw)
    x, _, _ = layer_samples(domain, delta, n_tangential)
    psi, grad, hess = barrier.evaluate(x)
    keep = psi > 0
    x, psi, grad = x[keep], psi[keep], grad[keep]
    level = np.clip(np.floor(np.log2(bw / psi) + 1e-9), 0, None).astype(int)
    P = _p_candidates(x, np.where(np.linalg.norm(grad, axis=1, keepdims=True) > 0, grad, 1.0), p_samples)
    T, X, D, L, Pf = _expand(x, psi, level, t_samples, P)
    psi_f, G, Hs = barrier.evaluate(X)
    tr, normal = _geometry_terms(a, X, G, Hs, False)
    drift = np.empty(len(X))
    for t in np.unique(T):
        sel = T == t
        drift[sel] = -np.sum(model.Hp(t, X[sel], Pf[sel]) * G[sel], axis=1)
    m0 = tr + drift - normal / psi_f
    C_used, fitted = _resolve(m0, psi_f, L, C)
    return InvarianceReport("generalized_barrier", T, X, Pf, psi_f, L, m0, C_used, fitted, delta,
                            {"levels": N_LEVELS, "blend_width": bw})
