import math
import warnings

import numpy as np
import pytest

from sisylab.engine import SimConfig
from sisylab.exceptions import LinearityWarning
from sisylab.lattice import LatticeParams
from sisylab.oracles import toy_spectrum
from sisylab.specfit import fit_central
from sisylab.spectroscopy import (BrownianGratingToy, ProbeSpec, Spectrum, grating_observable,
                                  lockin, probe_gain, spectrum_scan)

P = LatticeParams(theta=math.pi / 6)


@pytest.mark.parametrize("delta", [0.3, 2.0, -5.0])
def test_lockin_recovers_sine_amplitude(delta):
    b = 0.37
    period = 2 * math.pi / abs(delta)
    t = np.arange(1, 64 * 16 + 1) * period / 64
    amp, blocks = lockin(t, b * np.sin(delta * t), delta, n_blocks=8)
    assert abs(-amp.imag - b) <= 1e-3
    assert np.allclose(-blocks.imag, b, atol=1e-3)
    assert abs(amp.real) <= 1e-3


def test_lockin_block_length_check():
    with pytest.raises(ValueError):
        lockin(np.arange(10.0), np.zeros(10), 1.0, n_blocks=3)


def test_grating_uniform_cloud():
    rng = np.random.default_rng(0)
    n = 10_000
    x = rng.uniform(0, 200 * 2 * math.pi / P.K, n)
    z = rng.uniform(0, 200 * 2 * math.pi / abs(P.K_plus - 1), n)
    assert abs(grating_observable(x, z, P)) < 3 / math.sqrt(n)


def test_grating_perfect():
    assert grating_observable(np.zeros(5), np.zeros(5), P) == 1


def test_grating_rejection_sampled_density():
    rng = np.random.default_rng(1)
    q = P.K_plus - 1
    lx, lz = 2 * math.pi / P.K, 2 * math.pi / abs(q)
    n = 200_000
    x = rng.uniform(0, lx, 2 * n)
    z = rng.uniform(0, lz, 2 * n)
    keep = rng.uniform(0, 1.2, 2 * n) < 1 + 0.2 * np.cos(P.K * x) * np.cos(q * z)
    o = grating_observable(x[keep][:n], z[keep][:n], P)
    assert o.real == pytest.approx(0.05, abs=0.01)
    assert abs(o.imag) < 0.01
    assert abs(o) <= 1


def test_grating_empty():
    with pytest.raises(ValueError):
        grating_observable([], [], P)


def test_probe_spec_validation():
    with pytest.raises(ValueError):
        ProbeSpec(epsilon=0.0)
    with pytest.raises(ValueError):
        ProbeSpec(epsilon=0.3)
    with pytest.raises(ValueError):
        ProbeSpec(n_blocks=1)
    settle, block, n = ProbeSpec(delta=1.0).resolve(4.0)
    assert settle == pytest.approx(5.0)
    assert n >= 8
    assert (block * n) / (2 * math.pi) == pytest.approx(round(block * n / (2 * math.pi)))


def test_empty_grid():
    spec = spectrum_scan(P, [], ProbeSpec(), SimConfig(dt=0.01, t_total=1.0, n_atoms=16))
    assert len(spec) == 0


def test_spectrum_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        spectrum_scan(P, [1.0, 0.5], ProbeSpec(), None)
    with pytest.raises(ValueError):
        Spectrum([1.0, 1.0], [0, 0], [1, 1])


@pytest.fixture(scope="module")
def toy():
    return toy_spectrum(seed=0)


def test_toy_line_width(toy):
    spec, rate = toy
    fit = fit_central(spec, delta_max=spec.delta.max())
    assert fit.gamma_r == pytest.approx(rate, rel=0.10)


def test_toy_odd_symmetry(toy):
    spec, rate = toy
    for d, g, e in zip(spec.delta, spec.gain, spec.gain_err):
        if d <= 0:
            continue
        k = np.nonzero(np.isclose(spec.delta, -d))[0][0]
        assert abs(g + spec.gain[k]) <= 2 * math.hypot(e, spec.gain_err[k])
    pos = spec.gain[spec.delta > 0]
    assert np.all(np.sign(pos) == np.sign(pos[0]))


def test_toy_linear_response():
    toy = BrownianGratingToy(P, n_particles=20000, seed=3)
    probe = ProbeSpec(epsilon=0.1, delta=toy.rate, settle_time=5 / toy.rate)
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinearityWarning)
        r = probe_gain(P, probe, None, check_linearity=True, system=toy)
    assert abs(r.gain) > 5 * r.gain_err


def test_zero_detuning_dispersive_gain_vanishes():
    toy = BrownianGratingToy(P, n_particles=5000, seed=4)
    r = probe_gain(P, ProbeSpec(delta=0.0, settle_time=5 / toy.rate), None, system=toy)
    assert abs(r.gain) <= 3 * r.gain_err + 1e-3


def test_spectrum_end_to_end_shape():
    p = LatticeParams(delta0p=-50.0, gamma0p=5.0, theta=math.pi / 6)
    cfg = SimConfig(dt=SimConfig.auto_dt(p), t_total=20.0, n_atoms=400, seed=8)
    wx = 2 * p.K * math.sqrt(50)
    probe = ProbeSpec(settle_time=4.0, measure_time=12.0)
    spec = spectrum_scan(p, [-wx, -0.6, 0.6, wx], probe, cfg)
    assert spec.ok.all()
    assert np.all(np.isfinite(spec.gain)) and np.all(spec.gain_err > 0)
    assert np.all(spec.n_atoms == 400)
