import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisylab.engine import InitSpec, SimConfig, run_ensemble
from sisylab.exceptions import (InsufficientData, NonlinearRegime, NoRelaxation,
                                StabilityViolation)
from sisylab.lattice import LatticeParams, grating_wavevector
from sisylab.observables import (DiffusionEstimator, MsdSeries, TemperatureRelaxationEstimator,
                                 fit_diffusion, fit_relaxation, gamma_d_general, gamma_d_lattice,
                                 msd_from_positions, msd_series, pde_relaxation_oracle)
from sisylab.oracles import brownian_msd, noisy_relaxation, random_fick_cases


def line_series(t, y):
    z = np.zeros_like(y)
    return MsdSeries(t, y, y, z, z, 100)


@pytest.mark.parametrize("d", [1.0, 5.0])
def test_brownian_diffusion_recovered(d):
    msd = brownian_msd(d, seed=1)
    res = fit_diffusion(msd, window=(0.0, msd.times[-1]))
    assert res.d_x == pytest.approx(d, rel=0.05)
    assert res.d_z == pytest.approx(d, rel=0.05)
    slope = np.polyfit(msd.times, msd.msd_x, 1)[0]
    assert slope == pytest.approx(2 * d, rel=0.05)


def test_exact_line():
    t = np.linspace(0, 10, 50)
    res = fit_diffusion(line_series(t, 6.0 * t))
    assert res.d_x == pytest.approx(3.0, rel=1e-12)
    assert res.r2_x == pytest.approx(1.0)


def test_ballistic_series():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((2, 200))
    t = np.linspace(0, 10, 100)
    x, z = t[:, None] * v[0], t[:, None] * v[1]
    msd = msd_from_positions(t, x, z)
    assert np.allclose(msd.msd_x, np.mean(v[0] ** 2) * t**2)
    with pytest.raises(NonlinearRegime):
        fit_diffusion(msd, window=(0.0, 10.0))


def test_frozen_dynamics_zero_msd():
    p = LatticeParams(delta0p=-1e-300, gamma0p=0.0)
    cfg = SimConfig(dt=0.01, t_total=1.0, n_atoms=32, init=InitSpec(temperature=0.0))
    msd = msd_series(run_ensemble(p, cfg))
    assert np.all(msd.msd_x == 0) and np.all(msd.msd_z == 0)


def test_msd_needs_atoms():
    with pytest.raises(InsufficientData):
        msd_from_positions([0, 1], np.zeros((2, 8)), np.zeros((2, 8)))


def test_translation_invariance():
    msd = brownian_msd(1.0, n_atoms=500, seed=3)
    rng = np.random.default_rng(3)
    # dyadic positions make the shifted coordinates exactly representable
    pos = np.round(np.cumsum(rng.standard_normal((2, 50, 300)), axis=1) * 2**20) / 2**20
    t = np.arange(50.0)
    a = fit_diffusion(msd_from_positions(t, pos[0], pos[1]))
    b = fit_diffusion(msd_from_positions(t, pos[0] + 8.0, pos[1] - 4.0))
    c = fit_diffusion(msd_from_positions(t, pos[0] - pos[0][0], pos[1] - pos[1][0]))
    assert (a.d_x, a.d_z) == (b.d_x, b.d_z)
    assert a.d_x == pytest.approx(c.d_x, rel=1e-12)
    assert msd.n_atoms == 500


def test_relaxation_rate_recovered():
    fit = fit_relaxation(*noisy_relaxation(rate=0.4, seed=2))
    assert fit.rate == pytest.approx(0.4, rel=0.03)


def test_constant_series_has_no_relaxation():
    t = np.linspace(0, 10, 100)
    y = 2.0 + 0.01 * np.random.default_rng(0).standard_normal(100)
    with pytest.raises(NoRelaxation):
        fit_relaxation(t, y, np.full(100, 0.01))


def test_time_rescaling_halves_rate():
    t, y, e = noisy_relaxation(seed=4)
    a = fit_relaxation(t, y, e)
    b = fit_relaxation(2 * t, y, e)
    assert b.rate == pytest.approx(a.rate / 2, rel=1e-6)


def test_gamma_d_examples():
    assert gamma_d_general((1, 0, 2), (1, 0, 1)) == pytest.approx(6.0)
    assert gamma_d_general((0, 0), (1, 1)) == 0
    assert gamma_d_general((3, 2), (0, 0)) == 0
    p = LatticeParams(theta=math.pi / 6)
    expected = 100 * (0.25 + (1 - math.sqrt(3) / 2) ** 2)
    assert gamma_d_lattice((100.0, 100.0), p) == pytest.approx(2 * expected)
    # single-axis form: 1 hbar k^2/M = 2 omega_r
    assert gamma_d_general((1.0, 0.0), (1.0, 0.0)) == pytest.approx(2.0)
    assert gamma_d_lattice((5.0, 5.0), LatticeParams(theta=1e-6)) < 1e-9
    with pytest.raises(ValueError):
        gamma_d_general((-1, 0), (1, 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=2),
       st.lists(st.floats(-3, 3), min_size=2, max_size=2),
       st.floats(0.01, 10), st.floats(0.01, 10))
def test_gamma_d_bilinear(d, dk, alpha, beta):
    g = gamma_d_general(d, dk)
    assert gamma_d_general(np.multiply(alpha, d), dk) == pytest.approx(alpha * g, rel=1e-9, abs=1e-12)
    assert gamma_d_general(d, np.multiply(beta, dk)) == pytest.approx(beta**2 * g, rel=1e-9, abs=1e-12)


def test_pde_oracle_examples():
    assert pde_relaxation_oracle((0.0, 0.0), (1.0, 1.0), t_end=5.0) == 0.0
    r = pde_relaxation_oracle((1.0, 0.0, 2.0), (1.0, 0.0, 1.0))
    assert r == pytest.approx(6.0, rel=0.01)
    r2 = pde_relaxation_oracle((2.0, 0.0, 4.0), (1.0, 0.0, 1.0))
    assert r2 == pytest.approx(2 * r, rel=0.01)
    p = LatticeParams(theta=math.pi / 6)
    assert pde_relaxation_oracle((100.0, 100.0), grating_wavevector(p)) == pytest.approx(
        2 * 26.795, rel=0.01)


def test_pde_oracle_matches_closed_form():
    for dx, dz, theta in random_fick_cases(5, seed=9):
        dk = grating_wavevector(LatticeParams(theta=theta))
        assert pde_relaxation_oracle((dx, dz), dk) == pytest.approx(
            gamma_d_general((dx, dz), dk), rel=0.01)


def test_pde_oracle_stability():
    with pytest.raises(StabilityViolation):
        pde_relaxation_oracle((1.0, 1.0), (1.0, 1.0), dt=10.0)
    with pytest.raises(ValueError):
        pde_relaxation_oracle((1.0, 1.0), (1.0, 1.0), points_per_period=8)


@pytest.fixture(scope="module")
def sisyphus_ensemble():
    p = LatticeParams(gamma0p=8.0)
    cfg = SimConfig(dt=SimConfig.auto_dt(p), t_total=25.0, n_atoms=500, seed=4, record_stride=10)
    return p, run_ensemble(p, cfg)


def test_estimators_on_ensemble(sisyphus_ensemble):
    p, ens = sisyphus_ensemble
    est = DiffusionEstimator().fit(ens)
    assert est.get_params() == {"window": None}
    assert est.d_x_ > 0 and est.d_z_ > 0
    assert est.result_.r2_x >= 0.95 and est.result_.r2_z >= 0.95
    assert est.gamma_d(p) == pytest.approx(gamma_d_lattice(est.result_, p))
    assert isinstance(est.transform(ens), MsdSeries)
    tr = TemperatureRelaxationEstimator().fit(ens)
    assert tr.gamma_tz_ > 0
    # z relaxes much faster than x at these parameters
    assert tr.gamma_tx_ < tr.gamma_tz_


def test_quench_relaxation_of_heated_axis(sisyphus_ensemble):
    from sisylab.observables import quench_relaxation
    from sisylab.spectroscopy import thermalized_snapshot

    p, ens = sisyphus_ensemble
    late = ens.pz[len(ens.times) // 2:] ** 2
    start = thermalized_snapshot(ens, 2 * np.mean(ens.px[-1] ** 2), 2 * late.mean())
    fit = quench_relaxation(p, start, SimConfig.auto_dt(p), 20.0, "z", seed=1)
    assert fit.rate > 0 and fit.amplitude > 0
    # the heated axis starts three times above its snapshot value
    assert fit.predict(0.0) == pytest.approx(3 * np.mean(start[3] ** 2), rel=0.3)
    with pytest.raises(ValueError):
        quench_relaxation(p, start, 0.01, 1.0, "y")
