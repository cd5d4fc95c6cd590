import numpy as np
import pytest

from fixtures import SQUARE, UNIT, inward_model, viable_drift, wf, wf_sigma
from viable_mfg.geometry import signed_distance
from viable_mfg.invariance import (
    check_fp_invariance,
    check_generalized,
    check_hjb_invariance,
    check_sde_invariance,
    fit_constant,
)
from viable_mfg.models import constant_diffusion, linear_hamiltonian, quadratic_hamiltonian


def zero_model(dim=1):
    return linear_hamiltonian(lambda t, x: np.zeros_like(x), dim, bound=0.0)


def axis_inward_model():
    """Hp = -sign(1/2 - x) per coordinate: unit inward push towards every face."""
    return linear_hamiltonian(lambda t, x: np.sign(0.5 - x), 2, bound=np.sqrt(2))


def test_wright_fisher_inward_unit_push_margin_is_x():
    rep = check_hjb_invariance(UNIT, wf(), inward_model(UNIT), 0.1, C=0.0)
    assert rep.passed and rep.fitted_C == 0.0
    # margin = 0 + 1 - (1 - d) = d at every sample
    np.testing.assert_allclose(rep.margin0, rep.distance, atol=1e-12)


def test_nondegenerate_diffusion_needs_infinite_constant():
    rep = check_hjb_invariance(UNIT, constant_diffusion(0.1, 1), zero_model(), 0.1, C="auto")
    assert rep.fitted_C == np.inf and not rep.passed
    assert check_hjb_invariance(UNIT, constant_diffusion(0.1, 1), zero_model(), 0.1, C=100.0).verdict == "fail"


def test_no_diffusion_no_drift_passes_with_zero_constant():
    rep = check_hjb_invariance(UNIT, constant_diffusion(0.0, 1), zero_model(), 0.1, C=0.0)
    assert rep.passed and np.all(rep.margin0 == 0)


def test_quadratic_hamiltonian_fails_with_large_outward_gradients():
    assert not check_hjb_invariance(UNIT, wf(), quadratic_hamiltonian(1), 0.1).passed


def test_fp_trace_form_without_drift_fails():
    rep = check_fp_invariance(UNIT, wf(), lambda t, x: np.zeros_like(x), 0.1, C=0.0)
    assert not rep.passed
    np.testing.assert_allclose(rep.margin0, -(1 - rep.distance), atol=1e-12)


def test_fp_divergence_form_fitted_constant_matches_hand_value():
    delta = 0.45
    rep = check_fp_invariance(UNIT, wf(), lambda t, x: -(1 - 2 * x), delta, C="auto", divergence_form=True)
    # margin = 1 - 3d + C d, so the binding sample is d = delta
    assert rep.fitted_C == pytest.approx(3 - 1 / delta, rel=1e-6)
    assert rep.passed


def test_hjb_and_fp_trace_form_agree_for_b_equal_hp():
    model = inward_model(UNIT, 0.7)
    hjb = check_hjb_invariance(UNIT, wf(), model, 0.1, C=0.0, p_samples=[[0.0]])
    b = lambda t, x: model.Hp(t, x, np.zeros_like(x))  # noqa: E731
    fp = check_fp_invariance(UNIT, wf(), b, 0.1, C=0.0)
    keep = np.all(hjb.p == 0, axis=1)
    np.testing.assert_allclose(np.sort(hjb.margin0[keep]), np.sort(fp.margin0), atol=1e-12)


def test_inward_fp_drift_without_diffusion_passes():
    b = lambda t, x: -signed_distance(UNIT, x)[1]  # noqa: E731
    assert check_fp_invariance(UNIT, constant_diffusion(0.0, 1), b, 0.1, C=0.0).passed


def test_sde_wright_fisher_drift_passes_and_free_control_fails():
    # margin = (1 - 2d) - (1 - d) + C d = (C - 1) d, so the smallest admissible constant is 1
    ok = check_sde_invariance(UNIT, wf_sigma, lambda t, x, al: viable_drift(t, x), 0.1, C="auto")
    assert ok.fitted_C == pytest.approx(1.0) and ok.passed
    assert not ok.at(0.0).passed
    bad = check_sde_invariance(UNIT, wf_sigma, lambda t, x, al: al, 0.1, alpha_samples=[[-1.0, 0.0, 1.0]])
    assert not bad.at(0.0).passed


def test_min_margin_is_monotone_in_C():
    rep = check_hjb_invariance(UNIT, wf(), quadratic_hamiltonian(1), 0.1)
    values = [rep.at(C).min_margin for C in (0.0, 1.0, 10.0, 100.0)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_fit_constant_trivial_and_divergent():
    d = np.array([0.1, 0.05, 0.025, 0.0125])
    assert fit_constant(np.ones(4), d) == 0.0
    assert fit_constant(-0.1 / d, d, level=np.arange(4)) == np.inf


def test_generalized_per_piece_pass_implies_barrier_pass():
    model = axis_inward_model()
    per = check_generalized(SQUARE, wf(2), model, 0.1, C=0.0, mode="per_piece")
    assert per.passed and per.condition_id == "generalized_piecewise"
    bar = check_generalized(SQUARE, wf(2), model, 0.1, C="auto", mode="barrier")
    assert np.isfinite(bar.fitted_C) and bar.passed


def test_csv_and_summary(tmp_path):
    rep = check_hjb_invariance(UNIT, wf(), inward_model(UNIT), 0.1, C=0.0)
    rep.to_csv(tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "t,x1,p1,d,margin_C0,margin"
    assert rep.summary()["verdict"] == "pass" and rep.summary()["caveats"]
