import math
import warnings

import numpy as np
import pytest

from sisylab.exceptions import ProbeAmplitudeWarning
from sisylab.lattice import (LatticeParams, grating_wavevector, harmonic_frequencies,
                             probe_force, probe_modulation, pumping_rates, sigma_intensities,
                             sublevel_potentials)

P = LatticeParams()


def cell_grid(params, n=64):
    lx, lz = params.cell
    x, z = np.meshgrid(np.arange(n) * lx / n, np.arange(n) * lz / n, indexing="ij")
    return x, z


def z_peak(params):
    # sin(2 K_+ z) = 1
    return math.pi / (4 * params.K_plus)


def test_intensities_sum_and_range():
    x, z = cell_grid(P)
    sp, sm = sigma_intensities(x, z, P)
    assert np.all((sp >= 0) & (sp <= 2)) and np.all((sm >= 0) & (sm <= 2))
    np.testing.assert_allclose(sp + sm, 1 + np.cos(P.K * x) ** 2, atol=1e-14)


def test_intensity_examples():
    z = z_peak(P)
    sp, sm = sigma_intensities(0.0, z, P)
    assert sp == pytest.approx(2.0, abs=1e-14) and sm == pytest.approx(0.0, abs=1e-14)
    sp, sm = sigma_intensities(math.pi / (2 * P.K), 0.7, P)
    assert sp == pytest.approx(0.5, abs=1e-14) and sm == pytest.approx(0.5, abs=1e-14)
    sp, sm = sigma_intensities(math.pi / P.K, z, P)
    assert sp == pytest.approx(0.0, abs=1e-14) and sm == pytest.approx(2.0, abs=1e-14)


def test_antitranslation_swaps_sublevels():
    rng = np.random.default_rng(1)
    x, z = rng.uniform(-20, 20, (2, 100))
    a = sublevel_potentials(x, z, P)
    b = sublevel_potentials(x + math.pi / P.K, z, P)
    np.testing.assert_allclose(b.u_plus, a.u_minus, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.s_plus, a.s_minus, rtol=0, atol=1e-14)
    rp, rm = pumping_rates(x, z, P)
    rp2, rm2 = pumping_rates(x + math.pi / P.K, z, P)
    np.testing.assert_allclose(rp2, rm, rtol=0, atol=1e-14)


def test_periodicity():
    rng = np.random.default_rng(2)
    x, z = rng.uniform(-5, 5, (2, 200))
    lx, lz = P.cell
    a = sublevel_potentials(x, z, P)
    for dx, dz in ((lx, 0), (0, lz)):
        b = sublevel_potentials(x + dx, z + dz, P)
        np.testing.assert_allclose(b.u_plus, a.u_plus, atol=1e-11)
        np.testing.assert_allclose(b.u_minus, a.u_minus, atol=1e-11)


def test_potential_difference_form():
    rng = np.random.default_rng(3)
    x, z = rng.uniform(-5, 5, (2, 50))
    f = sublevel_potentials(x, z, P)
    ref = np.cos(P.K * x) * np.sin(2 * P.K_plus * z)
    np.testing.assert_allclose(f.u_plus - f.u_minus, (4 * P.delta0p / 3) * ref, atol=1e-12)


def test_red_detuned_minimum_at_pure_sigma_plus_site():
    x, z = cell_grid(P, 128)
    f = sublevel_potentials(x, z, P)
    k = np.unravel_index(np.argmin(f.u_plus), f.u_plus.shape)
    assert f.s_plus[k] == pytest.approx(2.0, abs=2e-3)


def test_forces_match_finite_differences():
    rng = np.random.default_rng(4)
    x, z = rng.uniform(-10, 10, (2, 1000))
    h = 1e-6
    f = sublevel_potentials(x, z, P)
    for u, (fx, fz), name in ((lambda a, b: sublevel_potentials(a, b, P).u_plus, f.f_plus, "+"),
                              (lambda a, b: sublevel_potentials(a, b, P).u_minus, f.f_minus, "-")):
        gx = -(u(x + h, z) - u(x - h, z)) / (2 * h)
        gz = -(u(x, z + h) - u(x, z - h)) / (2 * h)
        scale = np.maximum(np.hypot(fx, fz), 1.0)
        assert np.max(np.hypot(gx - fx, gz - fz) / scale) <= 1e-6, name


def test_pumping_examples_and_average():
    z = z_peak(P)
    rp, _ = pumping_rates(0.0, z, P)
    assert rp == pytest.approx(0.0, abs=1e-15)
    rp, rm = pumping_rates(math.pi / (2 * P.K), 0.3, P)
    assert rp == pytest.approx(rm) and rp == pytest.approx(2 / 9 * P.gamma0p * 0.5)
    x, z = cell_grid(P, 256)
    rp, _ = pumping_rates(x, z, P)
    assert rp.mean() == pytest.approx(2 / 9 * P.gamma0p * 0.75, rel=1e-10)


def test_probe_modulation():
    rng = np.random.default_rng(5)
    x, z, t = rng.uniform(-5, 5, (3, 50))
    assert np.all(probe_modulation(x, z, t, 1.3, 0.0, P) == 0)
    np.testing.assert_allclose(probe_modulation(x, z, t, 0.7, 0.1, P),
                               probe_modulation(x, z, -t, -0.7, 0.1, P), atol=1e-14)
    # static grating: period 2 pi / (1 - cos theta) along z
    lz = 2 * math.pi / (1 - P.K_plus)
    np.testing.assert_allclose(probe_modulation(x, z + lz, 0, 0, 0.1, P),
                               probe_modulation(x, z, 0, 0, 0.1, P), atol=1e-12)
    kx, kz = grating_wavevector(LatticeParams(theta=math.pi / 3))
    assert (kx, kz) == (pytest.approx(0.8660254, abs=1e-7), pytest.approx(0.5, abs=1e-12))


def test_probe_force_is_gradient():
    rng = np.random.default_rng(6)
    x, z, t = rng.uniform(-5, 5, (3, 200))
    h = 1e-6
    fx, fz = probe_force(x, z, t, 0.9, 0.1, P)
    gx = -(probe_modulation(x + h, z, t, 0.9, 0.1, P) - probe_modulation(x - h, z, t, 0.9, 0.1, P)) / (2 * h)
    gz = -(probe_modulation(x, z + h, t, 0.9, 0.1, P) - probe_modulation(x, z - h, t, 0.9, 0.1, P)) / (2 * h)
    assert np.max(np.hypot(gx - fx, gz - fz)) <= 1e-6 * max(1.0, np.max(np.hypot(fx, fz)))


def test_large_probe_warns():
    with pytest.warns(ProbeAmplitudeWarning):
        probe_modulation(0.0, 0.0, 0.0, 0.0, 0.3, P)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        probe_modulation(0.0, 0.0, 0.0, 0.0, 0.2, P)


def test_harmonic_frequencies_match_curvature():
    x0, z0 = 0.0, z_peak(P)
    h = 1e-3
    u = lambda a, b: sublevel_potentials(a, b, P).u_plus
    kx = (u(x0 + h, z0) - 2 * u(x0, z0) + u(x0 - h, z0)) / h**2
    kz = (u(x0, z0 + h) - 2 * u(x0, z0) + u(x0, z0 - h)) / h**2
    # H = p^2 + U in recoil units -> omega = 2 sqrt(U''/2)
    wx, wz = harmonic_frequencies(P)
    assert wx == pytest.approx(2 * math.sqrt(kx / 2), rel=1e-5)
    assert wz == pytest.approx(2 * math.sqrt(kz / 2), rel=1e-5)


@pytest.mark.parametrize("kw", [dict(theta=0.0), dict(theta=math.pi / 2), dict(delta0p=0.0),
                                dict(gamma0p=-1.0), dict(recoil_kick_count=1.5)])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        LatticeParams(**kw)
