import math

import numpy as np
import pytest
from scipy import stats

from pdtransport import vmeasure
from pdtransport.vmeasure import SeparableWeight


LEB = vmeasure.lebesgue_annulus(2, 0.0, 1.0)


def test_lebesgue_disk_integrals():
    q = vmeasure.quadrature(LEB)
    assert vmeasure.integrate_velocity(LEB, q, lambda v: np.ones(len(v))) == pytest.approx(math.pi, abs=1e-8)
    assert vmeasure.integrate_velocity(LEB, q, lambda v: np.linalg.norm(v, axis=-1)) == pytest.approx(
        2 * math.pi / 3, abs=1e-8)


def test_single_speed_second_moment_in_three_dimensions():
    m = vmeasure.single_speed(3, 1.0, mass=2.5)
    q = vmeasure.quadrature(m, n_dir=200)
    assert vmeasure.integrate_velocity(m, q, lambda v: v[:, 0] ** 2) == pytest.approx(2.5 / 3, rel=1e-10)


def test_invalid_measures():
    with pytest.raises(ValueError):
        vmeasure.lebesgue_annulus(4, 0.0, 1.0)
    with pytest.raises(ValueError):
        vmeasure.lebesgue_annulus(2, 1.0, 0.5)
    with pytest.raises(ValueError):
        vmeasure.single_speed(2, 1.0, mass=0.0)


def test_uniform_directions_pass_chi_square():
    m = vmeasure.single_speed(2)
    w = SeparableWeight(np.ones_like, lambda v: np.ones(len(v)), 1.0)
    v = vmeasure.sample_velocity(m, w, 0, 100_000)
    th = np.arctan2(v[:, 1], v[:, 0])
    counts, _ = np.histogram(th, bins=36, range=(-math.pi, math.pi))
    assert stats.chisquare(counts).pvalue > 0.01
    assert np.allclose(np.linalg.norm(v, axis=-1), 1.0)


def _cosine_angle_cdf(th):
    # CDF of theta in (-pi, pi] with density |cos theta| / 4
    a = np.abs(th)
    g = np.where(a <= math.pi / 2, np.sin(a), 2.0 - np.sin(a))
    return (np.sign(th) * g + 2.0) / 4.0


def test_cosine_law_matches_inverse_cdf():
    m = vmeasure.single_speed(2)
    n = np.array([1.0, 0.0])
    w = SeparableWeight(np.ones_like, lambda v: np.abs(v @ n), 1.0)
    v = vmeasure.sample_velocity(m, w, 1, 100_000)
    th = np.arctan2(v[:, 1], v[:, 0])
    assert stats.kstest(th, _cosine_angle_cdf).statistic <= 0.01


def test_maxwell_flux_acceptance_matches_gamma():
    R = 8.0
    m = vmeasure.lebesgue_annulus(2, 0.0, R)
    n = np.array([1.0, 0.0])

    def g(v):
        return np.exp(-0.5 * np.sum(v * v, axis=-1)) / (2 * math.pi) * np.abs(v @ n)

    bound = math.exp(-0.5) / (2 * math.pi)
    size = 20_000
    _, acc = vmeasure.rejection_sample(m, g, bound, 2, size)
    gamma = 1.0 / math.sqrt(2 * math.pi)
    expected = 2 * gamma / (bound * math.pi * R ** 2)
    tried = size / acc
    se = math.sqrt(expected * (1 - expected) / tried)
    assert abs(acc - expected) <= 3 * se


def test_mu_weights():
    n = np.array([0.0, 1.0])
    assert vmeasure.mu_density(n, np.array([3.0, 0.0])) == 0.0
    m = vmeasure.single_speed(2, 1.0, mass=1.5)
    full = (-math.pi / 2, math.pi / 2)
    # m(dv) = m0(drho) sigma(dw) / |S^1|, and the half-circle integral of |cos| is 2
    assert vmeasure.mu_weight(m, (0.0, 2.0), full) * 2 * math.pi == pytest.approx(2 * 1.5, rel=1e-12)
    fast = vmeasure.single_speed(2, 2.0, mass=1.5)
    cell = (0.1, 0.4)
    assert vmeasure.mu_weight(fast, (0.0, 3.0), cell) == pytest.approx(2 * vmeasure.mu_weight(m, (0.0, 3.0), cell))
    assert vmeasure.mu_total(m) == pytest.approx(1.5 / math.pi)


def test_radial_sampler_matches_lebesgue_cdf():
    s = vmeasure.RadialSampler(LEB)
    r = s(np.random.default_rng(3).random(50_000))
    assert stats.kstest(r, lambda x: np.clip(x, 0, 1) ** 2).statistic <= 0.01
    assert s.cdf_at(0.5) == pytest.approx(0.25, abs=1e-4)


def test_radial_sampler_reports_mass_below_floor():
    s = vmeasure.RadialSampler(LEB, floor=0.1)
    assert s.truncated_mass == pytest.approx(0.01, rel=1e-3)
    u = np.array([0.005, 0.5])
    out = s(u)
    assert out[0] == 0.0 and out[1] > 0.1
