import math

import numpy as np
import pytest

from pdtransport import boundary, geometry, pdmp, validation, vmeasure
from pdtransport.boundary import AlphaField, MaxwellKernel, PartlyDiffuseBoundary, ReflectionLaw
from pdtransport.spectral import density, grids

DISK = geometry.Disk(1.0)
SINGLE = vmeasure.single_speed(2, 1.0)
MAXWELL_M = vmeasure.lebesgue_annulus(2, 0.05, 4.0)


def pure(law):
    return PartlyDiffuseBoundary(AlphaField(value=1.0), ReflectionLaw(law), None)


def single_speed_diffuse(alpha=0.0):
    return PartlyDiffuseBoundary(AlphaField(value=alpha), ReflectionLaw("specular"),
                                 boundary.IsotropicKernel(SINGLE, lambda t: np.zeros_like(t)))


def hit_points(ens, H, n_hits):
    """Wall hit positions and times of a one-particle ensemble."""
    xs, ts = [], []
    for _ in range(n_hits):
        t = float(ens.t_hit[0])
        pdmp.simulate_to(ens, DISK, H, t)
        xs.append(ens.x[0].copy())
        ts.append(t)
    return np.array(xs), np.array(ts)


def test_specular_billiard_has_equal_chords():
    v0 = np.array([math.cos(0.7), math.sin(0.7)])
    ens = pdmp.init_ensemble(DISK, SINGLE, 1, law="point", point=([0.3, -0.2], v0))
    xs, _ = hit_points(ens, pure("specular"), 101)
    chords = np.linalg.norm(np.diff(xs, axis=0), axis=1)
    # incidence cosine at a hit of the unit disk is |x . w| with x the outward normal
    w = (xs[1] - xs[0]) / chords[0]
    cos_gamma = abs(np.dot(xs[1], w))
    assert np.max(np.abs(chords - 2 * cos_gamma)) <= 1e-10
    assert np.allclose(np.linalg.norm(xs, axis=1), 1.0, atol=1e-10)


def test_specular_billiard_chord_from_incidence_angle():
    gamma = 0.4
    # start on the wall at (1, 0) moving inward at angle gamma to -n
    x0 = np.array([1.0 - 1e-12, 0.0])
    v0 = np.array([-math.cos(gamma), math.sin(gamma)])
    ens = pdmp.init_ensemble(DISK, SINGLE, 1, law="point", point=(x0, v0))
    xs, _ = hit_points(ens, pure("specular"), 100)
    chords = np.linalg.norm(np.diff(np.vstack([x0, xs]), axis=0), axis=1)
    assert np.max(np.abs(chords - 2 * math.cos(gamma))) <= 1e-9


def test_bounce_back_retraces_chord():
    rng = np.random.default_rng(0)
    n = 50
    x0 = validation.random_interior(DISK, n, rng)
    w = validation.random_directions(2, n, rng)
    ens = pdmp.ParticleEnsemble(x0.copy(), w.copy(), np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64),
                                np.zeros(n, bool), 0)
    # speeds chosen so that every particle returns after one time unit
    period = 2 * (geometry.exit_distance(DISK, x0, w) + geometry.exit_distance(DISK, x0, -w))
    ens.v = w * period[:, None]
    ens.t_hit = geometry.exit_distance(DISK, x0, w) / period
    H = pure("bounce-back")
    for k in range(1, 101):
        pdmp.simulate_to(ens, DISK, H, float(k))
        err = np.max(np.abs(ens.positions(float(k)) - x0))
        assert err <= 1e-8 * DISK.diameter
        assert np.allclose(ens.v, w * period[:, None])


def test_speed_preserved_by_reflections_and_single_speed_diffuse():
    for H in (pure("specular"), single_speed_diffuse(0.5)):
        ens = pdmp.init_ensemble(DISK, SINGLE, 20, seed=3)
        pdmp.simulate_to(ens, DISK, H, 2500.0)
        assert ens.events.min() >= 1000
        assert np.allclose(np.linalg.norm(ens.v, axis=1), 1.0, atol=1e-12)
        assert pdmp.mass_highspeed(ens, 0.5) == 1.0


def maxwell_boundary():
    return PartlyDiffuseBoundary(AlphaField(value=0.0), ReflectionLaw("specular"), MaxwellKernel(MAXWELL_M))


def test_threads_do_not_change_results():
    H = maxwell_boundary()
    runs = []
    for threads in (1, 3):
        ens = pdmp.init_ensemble(DISK, MAXWELL_M, 2000, seed=11)
        pdmp.simulate_to(ens, DISK, H, 5.0, threads=threads)
        runs.append(ens)
    a, b = runs
    assert a.size == b.size == 2000
    for field in ("x", "v", "t0", "t_hit", "events", "frozen"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_uniform_initial_acceptance_matches_area_ratio():
    n = 20_000
    ens = pdmp.init_ensemble(DISK, SINGLE, n, seed=5)
    p = math.pi / 4
    # acceptance is measured over all rejection rounds
    tried = n / ens.info["acceptance"]
    assert abs(ens.info["acceptance"] - p) <= 3 * math.sqrt(p * (1 - p) / tried)
    assert np.all(DISK.level(ens.x) < 0)


def test_point_law_gives_identical_particles():
    ens = pdmp.init_ensemble(DISK, SINGLE, 10, law="point", point=([0.1, 0.2], [0.0, 1.0]))
    assert np.all(ens.x == ens.x[0]) and np.all(ens.v == ens.v[0])
    with pytest.raises(pdmp.InitialLawError):
        pdmp.init_ensemble(DISK, SINGLE, 10, law="gaussian")


def test_phase_initial_law_at_multinomial_floor():
    pg = grids.build_phase_grid(DISK, MAXWELL_M, 4, edges=grids.speed_edges(MAXWELL_M, 4), angle_cells=4)
    psi = density.maxwell_phase_oracle(pg) * pg.weight
    n = 50_000
    ens = pdmp.init_ensemble(DISK, MAXWELL_M, n, law="phase", seed=9, phase=pg, masses=psi)
    m, off = pdmp.empirical_masses(ens, pg)
    assert off == 0.0
    occupied = np.count_nonzero(psi > 0)
    assert density.l1_distance(m, psi) <= 3 * math.sqrt(occupied / n)


def test_empirical_density_of_a_point_mass():
    pg = grids.build_phase_grid(DISK, SINGLE, 4, angle_cells=4)
    ens = pdmp.init_ensemble(DISK, SINGLE, 7, law="point", point=([0.1, 0.1], [1.0, 0.2]))
    dens = pdmp.empirical_density(ens, pg)
    c = pg.locate(ens.x[:1], ens.v[:1])[0]
    expected = np.zeros(pg.size)
    expected[c] = 1.0 / pg.weight[c]
    assert np.allclose(dens, expected)


def test_refined_grid_spreads_mass_over_more_cells():
    ens = pdmp.init_ensemble(DISK, MAXWELL_M, 5000, seed=2)
    coarse = grids.build_phase_grid(DISK, MAXWELL_M, 4, edges=grids.speed_edges(MAXWELL_M, 4), angle_cells=4)
    fine = grids.build_phase_grid(DISK, MAXWELL_M, 4, edges=grids.speed_edges(MAXWELL_M, 8), angle_cells=4)
    mc, _ = pdmp.empirical_masses(ens, coarse)
    mf, _ = pdmp.empirical_masses(ens, fine)
    assert mc.sum() == pytest.approx(mf.sum())
    assert mf.mean() == pytest.approx(mc.mean() / 2)


def test_mass_in_compact_set():
    ens = pdmp.init_ensemble(DISK, SINGLE, 10, law="point", point=([0.0, 0.0], [1.0, 0.0]))
    assert pdmp.mass_in_F(ens, DISK, 0.1, 2.0) == 1.0
    assert pdmp.mass_in_F(ens, DISK, 3.0, 4.0) == 0.0
    with pytest.raises(ValueError):
        pdmp.mass_in_F(ens, DISK, 2.0, 1.0)
    # generic domains use the probing branch
    star = geometry.SmoothStar(r0=1.0)
    x = np.array([[0.0, 0.0], [0.95, 0.0]])
    assert list(pdmp.distance_from_boundary_at_least(star, x, 0.1)) == [True, False]


def test_maxwell_equilibrium_is_all_high_speed_at_zero_threshold():
    ens = pdmp.init_ensemble(DISK, MAXWELL_M, 1000, seed=1)
    pdmp.simulate_to(ens, DISK, maxwell_boundary(), 2.0)
    assert pdmp.mass_highspeed(ens, 0.0) == 1.0


def test_slow_particles_freeze_in_place():
    ens = pdmp.init_ensemble(DISK, SINGLE, 1, law="point", point=([0.2, 0.0], [1e-8, 0.0]))
    assert ens.frozen[0]
    pdmp.simulate_to(ens, DISK, pure("specular"), 100.0)
    assert np.array_equal(ens.positions(), [[0.2, 0.0]])
    assert ens.frozen_fraction() == 1.0


def test_event_budget_freezes_runaway_particles():
    ens = pdmp.init_ensemble(DISK, SINGLE, 4, seed=0)
    pdmp.simulate_to(ens, DISK, pure("specular"), 100.0, budget=10)
    assert ens.budget_frozen == 4
    assert ens.size == 4


def test_series_csv_format():
    ens = pdmp.init_ensemble(DISK, SINGLE, 200, seed=4)
    s = pdmp.run_observables(ens, DISK, single_speed_diffuse(), [0.0, 0.5, 1.0])
    text = s.to_csv()
    assert "\r" not in text
    lines = text.strip("\n").split("\n")
    assert lines[0] == ",".join(pdmp.SERIES_COLUMNS)
    assert len(lines) == 4
    assert np.all(s.columns["mass_highspeed"] == 1.0)
