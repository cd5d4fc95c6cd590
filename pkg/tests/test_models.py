import numpy as np
import pytest

from fixtures import UNIT, wf
from viable_mfg.errors import ModelError
from viable_mfg.geometry import box
from viable_mfg.models import (
    check_structure,
    constant_diffusion,
    divergence_drift,
    example1_hamiltonian,
    example2_hamiltonian,
    quadratic_hamiltonian,
    truncate_hamiltonian,
)


def test_wright_fisher_divergence_drift_is_one_minus_two_x():
    x = np.linspace(0.05, 0.95, 7)[:, None]
    np.testing.assert_allclose(divergence_drift(wf(), x)[:, 0], 1 - 2 * x[:, 0], atol=1e-7)
    S = wf().sigma(x)
    np.testing.assert_allclose((S @ S.transpose(0, 2, 1))[:, 0, 0], x[:, 0] * (1 - x[:, 0]))


def test_constant_diffusion_has_zero_divergence():
    a = constant_diffusion(0.3, 2)
    x = np.random.default_rng(0).uniform(size=(5, 2))
    assert np.allclose(divergence_drift(a, x), 0)
    assert a.is_diagonal(x)


def test_quadratic_hamiltonian_bregman_is_half_square_gap():
    H = quadratic_hamiltonian(1)
    x = np.zeros((3, 1))
    q = np.array([[1.0], [2.0], [-1.0]])
    p = np.array([[0.0], [1.0], [1.0]])
    np.testing.assert_allclose(H.bregman(0, x, q, p), 0.5 * (q - p)[:, 0] ** 2)


def test_example1_feedback_is_projected_and_points_inward():
    model = example1_hamiltonian(2.0, 1.0, None, UNIT)
    x = np.array([[0.05], [0.95]])
    p = np.zeros((2, 1))
    # p = 0 gives the zero control (Hp = -M Dd); large p saturates it at -R
    np.testing.assert_allclose(model.Hp(0, x, p)[:, 0], [-2.0, 2.0])
    big = np.array([[50.0], [50.0]])
    np.testing.assert_allclose(model.Hp(0, x, big)[:, 0], [-1.0, 3.0])


def test_example1_hamiltonian_derivative_matches_fd():
    model = example1_hamiltonian(2.0, 1.0, None, UNIT)
    x = np.full((4, 1), 0.3)
    p = np.array([[-2.0], [-0.3], [0.4], [3.0]])
    e = 1e-6
    fd = (model.H(0, x, p + e) - model.H(0, x, p - e)) / (2 * e)
    np.testing.assert_allclose(fd, model.Hp(0, x, p)[:, 0], atol=1e-6)


def test_truncation_caps_hamiltonian():
    T = truncate_hamiltonian(quadratic_hamiltonian(1), 0.1)
    assert np.all(T.H(0, np.zeros((1, 1)), np.array([[100.0]])) <= 10.0 + 1e-12)


def test_structure_report_passes_for_quadratic():
    rep = check_structure(quadratic_hamiltonian(2), wf(2), np.random.default_rng(1).uniform(size=(10, 2)))
    assert rep.passed


def test_example2_requires_valid_exponent():
    with pytest.raises(ModelError):
        example2_hamiltonian(1.0, 1.0, 0.5, 0.0, box([0, 0], [1, 1]))
