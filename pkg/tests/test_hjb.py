import logging

import numpy as np
import pytest

from fixtures import UNIT, quadratic, wf
from viable_mfg.errors import CFLViolation
from viable_mfg.fields import SpaceTimeField
from viable_mfg.geometry import disk
from viable_mfg.hjb import (
    HJBConfig,
    epsilon_continuation,
    lipschitz_estimate,
    max_principle_bound,
    semiconcavity_estimate,
    solve_hjb,
)
from viable_mfg.models import constant_diffusion, linear_hamiltonian


def zero_h(dim=1):
    return linear_hamiltonian(lambda t, x: np.zeros_like(x), dim, bound=0.0)


def test_constant_terminal_data_stays_constant():
    u = solve_hjb(UNIT, wf(), quadratic(), 0.0, 2.5, HJBConfig(h=1 / 16, dt=0.01, T=0.5))
    np.testing.assert_allclose(u.values, 2.5, atol=1e-12)


def test_unit_running_cost_gives_time_to_go():
    cfg = HJBConfig(h=1 / 16, dt=0.01, T=0.5)
    u = solve_hjb(UNIT, wf(), zero_h(), 1.0, 0.0, cfg)
    np.testing.assert_allclose(u.values, (cfg.T - cfg.times())[:, None] * np.ones(u.mesh.n), atol=1e-10)


def test_two_dimensional_disk_time_to_go():
    cfg = HJBConfig(h=0.125, dt=0.01, T=0.2)
    u = solve_hjb(disk((0, 0), 1.0), constant_diffusion(0.1, 2), zero_h(2), 1.0, 0.0, cfg)
    np.testing.assert_allclose(u.values[0], 0.2, atol=1e-10)


def test_maximum_principle_bound_holds():
    cfg = HJBConfig(h=1 / 32, dt=0.005, T=0.5)
    G = lambda x: np.sin(3 * x[:, 0])  # noqa: E731
    F = lambda t, x: 0.5 * np.cos(2 * x[:, 0])  # noqa: E731
    u = solve_hjb(UNIT, wf(), quadratic(), F, G, cfg)
    assert u.sup_norm() <= max_principle_bound(np.full(1, 0.5), np.ones(1), quadratic(), cfg.T) + 1e-8


def test_cfl_guard_raises():
    with pytest.raises(CFLViolation):
        solve_hjb(UNIT, wf(), quadratic(), 0.0, lambda x: 40 * x[:, 0], HJBConfig(h=1 / 32, dt=0.05, T=0.5))


def test_unregularised_degenerate_problem_warns_once(caplog):
    cfg = HJBConfig(h=1 / 16, dt=0.01, T=0.1)
    a, model = wf(), quadratic()
    with caplog.at_level(logging.WARNING, logger="viable_mfg"):
        solve_hjb(UNIT, a, model, 0.0, 0.0, cfg)
        solve_hjb(UNIT, a, model, 0.0, 0.0, cfg)
    assert sum("degenerates" in r.message for r in caplog.records) == 1


def test_lipschitz_and_semiconcavity_of_known_profiles():
    from viable_mfg.fields import MaskedGrid

    mesh = MaskedGrid.for_domain(UNIT, 1 / 20)
    x = mesh.centers[:, 0]
    lin = SpaceTimeField(mesh, [0.0], (3 * x)[None])
    assert lipschitz_estimate(lin) == pytest.approx(3.0)
    assert semiconcavity_estimate(lin) == pytest.approx(0.0, abs=1e-9)
    par = SpaceTimeField(mesh, [0.0], (x * x)[None])
    assert semiconcavity_estimate(par) == pytest.approx(2.0)
    kink = SpaceTimeField(mesh, [0.0], np.abs(x - 0.5)[None])
    assert semiconcavity_estimate(kink) == pytest.approx(1 / mesh.h)


def test_penalised_continuation_differences_shrink():
    cfg = HJBConfig(h=1 / 32, dt=0.002, T=0.5)
    steps = epsilon_continuation(UNIT, wf(), quadratic(), 0.0, lambda x: x[:, 0], cfg, [0.1, 0.05, 0.025])
    diffs = [s.diff for s in steps[1:]]
    assert diffs[1] < diffs[0]
