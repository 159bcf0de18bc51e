import math

import numpy as np
import pytest

from pdtransport import geometry, validation
from pdtransport.geometry import Annulus, Disk, Ellipse, SmoothStar


DISK = Disk(1.0)


def test_normals_on_simple_domains():
    assert np.allclose(geometry.normal(DISK, np.array([1.0, 0.0])), [1.0, 0.0])
    assert np.allclose(geometry.normal(Annulus(0.5, 1.0), np.array([0.5, 0.0])), [-1.0, 0.0])
    assert np.allclose(geometry.normal(Ellipse((2.0, 1.0)), np.array([2.0, 0.0])), [1.0, 0.0])


def test_exit_times_on_unit_disk():
    assert geometry.exit_time(DISK, np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))[0] == pytest.approx(1.0, abs=1e-12)
    assert geometry.exit_time(DISK, np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), "backward")[0] == pytest.approx(
        2.0, abs=1e-12)


@pytest.mark.parametrize("domain", [DISK, Ellipse((2.0, 1.0)), Annulus(0.5, 1.0)])
def test_exit_time_scales_inversely_with_speed(domain):
    rng = np.random.default_rng(1)
    x = validation.random_interior(domain, 50, rng)
    v = rng.standard_normal((50, 2))
    for direction in ("forward", "backward"):
        t1 = geometry.exit_time(domain, x, v, direction)
        t2 = geometry.exit_time(domain, x, 2 * v, direction)
        assert np.allclose(t2, t1 / 2, rtol=1e-12, atol=0)


@pytest.mark.parametrize("beta", [0.0, 0.3, 0.9, 1.3])
def test_disk_chord_length(beta):
    w = np.array([[math.cos(beta), math.sin(beta)]])
    tau = geometry.exit_time(DISK, np.array([[1.0, 0.0]]), w, "backward")[0]
    assert tau == pytest.approx(2 * math.cos(beta), abs=1e-10)


def test_zero_velocity_is_rejected():
    with pytest.raises(geometry.GeometryError):
        geometry.exit_time(DISK, np.zeros((1, 2)), np.zeros((1, 2)))


def test_ballistic_flow_on_diameter():
    b = geometry.ballistic_flow(DISK, np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert np.allclose(b.x, [[-1.0, 0.0]], atol=1e-12)
    assert np.allclose(b.v, [[1.0, 0.0]])
    assert b.side[0] == geometry.INCOMING


@pytest.mark.parametrize("domain", [DISK, Ellipse((2.0, 1.0)), Annulus(0.5, 1.0),
                                    SmoothStar(r0=1.0, cos_coeffs=(0.0, 0.0, 0.1))])
def test_flow_and_inverse_compose_to_identity(domain):
    rng = np.random.default_rng(2)
    x, w = validation.non_grazing_configurations(domain, 100, rng)
    x = x + geometry.exit_distance(domain, x, w)[:, None] * w
    back = geometry.ballistic_flow(domain, x, w)
    again = geometry.ballistic_flow_inv(domain, back.x, back.v)
    assert np.max(np.abs(again.x - x)) <= 1e-9 * domain.diameter
    assert validation.check_round_trip(domain).passed


def test_position_gradient_on_disk_matches_chord_derivative():
    for beta in (0.0, 0.4, 1.1):
        w = np.array([math.cos(beta), math.sin(beta)])
        g = geometry.grad_tau_x(DISK, np.array([1.0, 0.0]), w, np.array([0.0, 1.0]))
        assert g == pytest.approx(2 * math.sin(beta), abs=1e-10)


def test_direction_gradient_on_disk_matches_chord_derivative():
    for beta in (0.0, 0.4, 1.1):
        w = np.array([math.cos(beta), math.sin(beta)])
        h = np.array([-math.sin(beta), math.cos(beta)])
        g = geometry.grad_tau_omega(DISK, np.array([1.0, 0.0]), w, h)
        assert abs(g) == pytest.approx(2 * math.sin(beta), abs=1e-10)
        assert g == pytest.approx(-2 * math.sin(beta), abs=1e-10)


def test_calibrated_sign_matches_constant():
    assert geometry.calibrate_omega_sign() == geometry.OMEGA_GRADIENT_SIGN


@pytest.mark.parametrize("domain", [DISK, Ellipse((2.0, 1.0)), Annulus(0.5, 1.0)])
def test_gradients_against_finite_differences(domain):
    ex, ew = validation.gradient_errors(domain, n=100, seed=3)
    assert ex.max() <= 1e-5
    assert ew.max() <= 1e-5


def test_rank_one_determinant_examples():
    assert geometry.det_rank_one_update(2.0, np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(4.0)
    for d in range(2, 6):
        a = np.arange(1.0, d + 1)
        u = np.zeros(d)
        u[0], u[1] = a[1], -a[0]
        assert geometry.det_rank_one_update(1.7, a, u) == pytest.approx(1.7 ** d, rel=1e-14)
    assert validation.check_rank_one(1000).passed


def test_degenerate_direction_set():
    assert geometry.degenerate_direction_measure(2, 0.1) == (0.0, 0.0)
    prev = math.inf
    for eps in (0.2, 0.1, 0.05, 0.01):
        est, se = geometry.degenerate_direction_measure(3, eps, rng=0)
        assert est <= eps * math.pi + 3 * se
        assert est < prev
        prev = est


def test_polar_jacobian_in_three_dimensions():
    # last axis is the polar axis: Jacobian is sin of the angle from it
    th = 0.6
    w = np.array([math.sin(th), 0.0, math.cos(th)])
    assert geometry.polar_jacobian(w) == pytest.approx(math.sin(th))
