import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import UNIT, wf
from viable_mfg.errors import DriftMismatch, DriftUnboundedOnMask, GridMismatch
from viable_mfg.fp import boundary_mass, dual_uniqueness_identity, epsilon_continuation_fp, solve_fp
from viable_mfg.geometry import box
from viable_mfg.hjb import HJBConfig
from viable_mfg.models import constant_diffusion

CFG = HJBConfig(h=1 / 20, dt=0.01, T=0.5)


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(0.0, 0.5), st.integers(0, 1000))
def test_mass_is_conserved_and_density_nonnegative(v, scale, seed):
    m0 = np.random.default_rng(seed).uniform(0, 2, 20)
    m = solve_fp(UNIT, wf(scale=scale), lambda t, x: v * np.sin(3 * x + t), m0, CFG)
    mass = m.mass()
    assert np.max(np.abs(mass - mass[0])) <= 1e-10 * mass[0]
    assert m.values.min() >= 0


def test_uniform_density_stays_uniform_without_drift():
    m = solve_fp(UNIT, wf(), lambda t, x: -(1 - 2 * x) + (1 - 2 * x), 1.0, CFG)
    np.testing.assert_allclose(m.values, 1.0, atol=1e-12)


def test_boundary_mass_of_uniform_density():
    m = solve_fp(UNIT, constant_diffusion(0.0, 1), None, 1.0, CFG)
    np.testing.assert_allclose(boundary_mass(m, 0.1), 0.2, atol=1e-12)


def test_two_dimensional_mass_conservation():
    cfg = HJBConfig(h=0.1, dt=0.01, T=0.3)
    m = solve_fp(box([0, 0], [1, 1]), wf(2), lambda t, x: np.array([1.0, -0.5]) * np.ones_like(x), 1.0, cfg)
    assert np.ptp(m.mass()) <= 1e-12


def test_dual_identity_and_mismatches():
    beta = lambda t, x: 0.5 * np.cos(2 * np.pi * x)  # noqa: E731
    x = np.linspace(0.025, 0.975, 20)
    m1 = solve_fp(UNIT, wf(), beta, 1.0 + 0.5 * np.sin(2 * np.pi * x), CFG)
    m2 = solve_fp(UNIT, wf(), beta, 1.0, CFG)
    direct, dual = dual_uniqueness_identity(m1, m2, UNIT, wf(), beta, CFG)
    assert direct > 0 and abs(direct - dual) <= 1e-10
    with pytest.raises(DriftMismatch):
        dual_uniqueness_identity(m1, m2, UNIT, wf(), lambda t, x: 0 * x, CFG)
    other = solve_fp(UNIT, wf(), beta, 1.0, HJBConfig(h=1 / 10, dt=0.01, T=0.5))
    with pytest.raises(GridMismatch):
        dual_uniqueness_identity(m1, other, UNIT, wf(), beta, CFG)


def test_unbounded_drift_is_rejected():
    with pytest.raises(DriftUnboundedOnMask):
        solve_fp(UNIT, wf(), lambda t, x: np.where(x < 0.03, np.inf, 1.0), 1.0, CFG)


def test_shrink_continuation_reports_l1_differences():
    steps = epsilon_continuation_fp(UNIT, wf(), lambda t, x: -(1 - 2 * x), 1.0, HJBConfig(h=1 / 40, dt=0.01, T=0.5),
                                    [0.2, 0.1, 0.05])
    assert steps[0].sup_diff is None
    assert steps[2].sup_diff < steps[1].sup_diff
