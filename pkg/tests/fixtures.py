"""Shared fixture builders for the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from viable_mfg.geometry import box, interval, signed_distance
from viable_mfg.mfg import MFGConfig, MFGProblem
from viable_mfg.models import (
    coupling_F_from_config,
    coupling_G_from_config,
    example1_hamiltonian,
    linear_hamiltonian,
    quadratic_hamiltonian,
    wright_fisher_diffusion,
)

UNIT = interval(0.0, 1.0)
SQUARE = box([0.0, 0.0], [1.0, 1.0])


def wf(dim: int = 1, scale: float = 1.0):
    """a = diag(x_k (1 - x_k)) on the unit cube."""
    return wright_fisher_diffusion([0.0] * dim, [1.0] * dim, scale)


def inward_model(domain, speed: float = 1.0):
    """Hp = -speed Dd: unit inward push near every face."""
    return linear_hamiltonian(lambda t, x: speed * signed_distance(domain, x)[1], domain.dim, bound=speed)


def quadratic(dim: int = 1):
    return quadratic_hamiltonian(dim, 0.5)


def monotone_problem(T: float = 0.5) -> MFGProblem:
    """Bounded controls with inward push M=2, F(m) = m, G = 0, m0 uniform on (0, 1)."""
    model = example1_hamiltonian(2.0, 1.0, None, UNIT)
    F = coupling_F_from_config({"mode": "local", "kind": "linear", "scale": 1.0})
    G = coupling_G_from_config({"kind": "zero"})
    return MFGProblem(UNIT, wf(), model, F, G, lambda x: np.ones(len(x)), T)


def monotone_config(h: float = 1 / 32, dt: float = 0.01, tol: float = 1e-8) -> MFGConfig:
    return MFGConfig(h=h, dt=dt, tol=tol, damping=0.5, max_iters=400)


def bump_guess(x):
    """Unit-mass bump on the left half, the second initial guess."""
    g = np.exp(-((x[:, 0] - 0.25) ** 2) / (2 * 0.1**2))
    return g / (0.1 * np.sqrt(2 * np.pi))


def viable_drift(t, x):
    """b = 1 - 2x: the inward Wright-Fisher drift."""
    return 1.0 - 2.0 * x


def outward_drift(t, x):
    return -np.ones_like(x)


def wf_sigma(x):
    """sigma = sqrt(x (1 - x)) with no sqrt(2) factor, as a (n, 1, 1) array."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    return np.sqrt(np.clip(x * (1 - x), 0.0, None))[:, :, None]
