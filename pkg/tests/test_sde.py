import numpy as np
import pytest

from fixtures import UNIT, outward_drift, viable_drift, wf, wf_sigma
from viable_mfg.errors import NoStoredPaths
from viable_mfg.fields import MaskedGrid
from viable_mfg.sde import SDEConfig, empirical_density, lyapunov_check, read_paths, simulate, write_paths


def run(drift, n=2000, dt=1e-3, seed=3, **kw):
    cfg = SDEConfig(dt=dt, n_paths=n, seed=seed, **kw)
    return simulate(UNIT, wf_sigma, drift, 0.5, 1.0, cfg, store_paths=True)


def test_same_seed_is_bit_identical_across_chunking():
    a = run(viable_drift, n=300, chunk_paths=300)
    b = run(viable_drift, n=300, chunk_paths=64, block_steps=37)
    assert a.paths.X.tobytes() == b.paths.X.tobytes()
    assert a.stats.exit_fraction == b.stats.exit_fraction


def test_different_seeds_differ():
    assert not np.array_equal(run(viable_drift, n=50, seed=1).paths.X, run(viable_drift, n=50, seed=2).paths.X)


def test_viable_drift_keeps_paths_inside_and_outward_drift_exits():
    good = run(viable_drift)
    assert good.stats.exit_fraction <= 0.02
    assert good.paths.X.min() > 0 and good.paths.X.max() < 1
    assert run(outward_drift).stats.exit_fraction >= 0.5


def test_deterministic_drift_without_noise_is_exact():
    res = simulate(UNIT, 0.0, lambda t, x: np.full_like(x, 0.2), 0.3, 1.0, SDEConfig(dt=0.01, n_paths=4, seed=0),
                   store_paths=True)
    np.testing.assert_allclose(res.paths.X[-1], 0.5, atol=1e-12)


def test_lyapunov_report_on_viable_fixture():
    rep = lyapunov_check(run(viable_drift).paths, UNIT, C_expected=2.0)
    assert rep.passed and not rep.blow_up


def test_empirical_density_has_unit_mass_for_viable_fixture():
    res = run(viable_drift)
    mesh = MaskedGrid.for_domain(UNIT, 1 / 16)
    m = empirical_density(res.paths, mesh, 1.0)
    assert m.mass()[0] == pytest.approx(1.0 - res.stats.exit_fraction)
    with pytest.raises(NoStoredPaths):
        empirical_density(None, mesh, 1.0)


def test_paths_file_round_trip(tmp_path):
    res = run(viable_drift, n=20)
    write_paths(tmp_path / "p.bin", res.paths)
    back = read_paths(tmp_path / "p.bin")
    assert back.X.tobytes() == res.paths.X.tobytes()
    assert np.array_equal(back.exited, res.paths.exited)


def test_diffusion_field_and_sigma_callable_agree():
    a = run(viable_drift, n=100)
    cfg = SDEConfig(dt=1e-3, n_paths=100, seed=3)
    b = simulate(UNIT, wf(), viable_drift, 0.5, 1.0, cfg, store_paths=True)
    np.testing.assert_allclose(a.paths.X, b.paths.X, atol=1e-12)
