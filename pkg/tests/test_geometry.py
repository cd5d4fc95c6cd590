import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viable_mfg.errors import BlendInfeasible, EmptyDomain, GeometryError
from viable_mfg.fields import MaskedGrid
from viable_mfg.geometry import box, build_barrier, disk, domain_from_config, grid_masks, interval, signed_distance


def test_interval_distance_and_derivatives():
    d, g, H, _ = signed_distance(interval(0, 1), [0.1, 0.5, 0.8, 1.2])
    np.testing.assert_allclose(d, [0.1, 0.5, 0.2, -0.2])
    np.testing.assert_allclose(g[:, 0], [1, 1, -1, -1])
    assert np.all(H == 0)


def test_disk_distance_is_radius_minus_norm():
    d, g, H, _ = signed_distance(disk((0, 0), 1.0), [[0.5, 0.0], [0.0, -0.9]])
    np.testing.assert_allclose(d, [0.5, 0.1])
    np.testing.assert_allclose(g, [[-1, 0], [0, 1]], atol=1e-15)
    # D^2 d = -(I - n n^T) / |x| for the disk
    np.testing.assert_allclose(H[0], [[0, 0], [0, -2.0]])


def test_box_distance_is_min_over_faces():
    sq = box([0, 0], [1, 1])
    d, _, _, active = signed_distance(sq, [[0.1, 0.5], [0.5, 0.95]])
    np.testing.assert_allclose(d, [0.1, 0.05])
    assert active[0] != active[1]


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_box_distance_is_one_lipschitz(x, y):
    sq = box([0, 0], [1, 1])
    p = np.array([[x, y]])
    q = p + np.array([[1e-3, -2e-3]])
    assert abs(sq.distance(p)[0] - sq.distance(q)[0]) <= np.linalg.norm(q - p) + 1e-14


def test_barrier_matches_distance_near_one_face_and_plateaus_inside():
    sq = box([0, 0], [1, 1])
    B = build_barrier(sq, 0.2)
    psi, grad, hess = B.evaluate([[0.05, 0.5], [0.5, 0.5]])
    assert psi[0] == pytest.approx(0.05)
    np.testing.assert_allclose(grad[0], [1, 0])
    assert psi[1] == 1.0 and np.all(grad[1] == 0) and np.all(hess[1] == 0)


def test_barrier_derivatives_match_finite_differences():
    B = build_barrier(box([0, 0], [1, 1]), 0.3)
    x = np.array([[0.2, 0.27]])
    e = 1e-6
    _, g, H = B.evaluate(x)
    for k in range(2):
        dx = np.zeros((1, 2))
        dx[0, k] = e
        gp = B.evaluate(x + dx)[1]
        gm = B.evaluate(x - dx)[1]
        assert (B.value(x + dx) - B.value(x - dx))[0] / (2 * e) == pytest.approx(g[0, k], abs=1e-7)
        np.testing.assert_allclose((gp - gm)[0] / (2 * e), H[0, :, k], atol=1e-5)


def test_barrier_rejects_width_beyond_tube():
    with pytest.raises(BlendInfeasible):
        build_barrier(disk((0, 0), 1.0), 1.5)


def test_grid_masks_and_empty_domain():
    m = grid_masks(interval(0, 1), 0.1, eps=0.0, delta=0.2)
    assert m.interior.sum() == 10 and m.layer.sum() == 4
    with pytest.raises(EmptyDomain):
        grid_masks(interval(0, 1), 0.1, eps=0.49, delta=0.6)
    with pytest.raises(GeometryError):
        grid_masks(interval(0, 1), 0.3)


def test_disk_mask_keeps_cells_with_inside_centres():
    mesh = MaskedGrid.for_domain(disk((0, 0), 1.0), 0.125)
    assert np.all(np.linalg.norm(mesh.centers, axis=1) < 1.0)
    assert mesh.n == pytest.approx(np.pi / 0.125**2, rel=0.05)


def test_domain_from_config():
    dom = domain_from_config({"kind": "generalized_box", "bounds": [[0, 0], [1, 2]]})
    assert dom.kind == "generalized" and dom.dim == 2
    assert dom.distance([[0.5, 1.9]])[0] == pytest.approx(0.1)
