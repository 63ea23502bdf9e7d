import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crpslam.errors import DataError
from crpslam.rng import Stream
from crpslam.selftest import parseval_error, sinusoid_concentration
from crpslam.spectra import ensemble_mean_spectrum, high_wavenumber_energy, radial_spectrum


def noise(seed, h=32, w=32):
    return Stream(seed, lanes=64).normal(h * w).reshape(h, w)


def naive_dft_energy(f):
    """Direct O(N^4) transform as an independent oracle for one small field."""
    h, w = f.shape
    g = f - f.mean()
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h, w))
    for ky in range(h):
        for kx in range(w):
            c = np.sum(g * np.exp(-2j * np.pi * (ky * y / h + kx * x / w)))
            out[ky, kx] = abs(c) ** 2 / (h * w) ** 2
    return out


def test_constant_field_zero_spectrum():
    spec = radial_spectrum(np.full((16, 16), 3.7))
    assert np.all(spec.energy == 0)


def test_bins_cover_one_to_half_size():
    spec = radial_spectrum(noise(1, 16, 24))
    np.testing.assert_array_equal(spec.wavenumber, np.arange(1, 9))
    assert np.all(spec.energy >= 0)
    assert spec.count.sum() == 16 * 24 - 1


def test_sinusoid_concentration():
    assert sinusoid_concentration(64, 5) >= 0.99
    x = np.arange(64)
    spec = radial_spectrum(np.cos(2 * np.pi * 5 * x / 64)[None, :] * np.ones((64, 1)))
    assert np.argmax(spec.energy * spec.count) == 4


def test_parseval_random_fields():
    assert parseval_error(fields=30, size=24, seed=2) < 0.01


def test_white_noise_flat_and_parseval_in_expectation():
    specs = [radial_spectrum(noise(s)) for s in range(100)]
    energy = np.mean([s.energy for s in specs], axis=0)
    total = np.mean([s.total() for s in specs])
    assert abs(total - 1) < 0.02
    # flat: every bin with a decent mode count sits near the per-mode mean
    ok = specs[0].count >= 8
    per_mode = 1 / (32 * 32)
    assert np.all(np.abs(energy[ok] / per_mode - 1) < 0.25)


def test_matches_direct_transform():
    f = noise(3, 8, 8)
    energy = naive_dft_energy(f)
    spec = radial_spectrum(f)
    ky = np.fft.fftfreq(8) * 8
    r = np.floor(np.sqrt(ky[:, None] ** 2 + ky[None, :] ** 2) + 0.5).astype(int)
    r = np.minimum(r, 4)
    for k in range(1, 5):
        assert spec.energy[k - 1] == pytest.approx(energy[r == k].mean(), rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 31), st.integers(0, 31))
def test_shift_invariance(seed, dy, dx):
    f = noise(seed)
    a = radial_spectrum(f).energy
    b = radial_spectrum(np.roll(f, (dy, dx), axis=(0, 1))).energy
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_parseval_property(seed):
    f = noise(seed, 16, 20) * 3 + 1
    assert radial_spectrum(f).total() == pytest.approx(f.var(), rel=1e-10)


def test_errors():
    with pytest.raises(DataError):
        radial_spectrum(np.zeros((4, 16)))
    with pytest.raises(DataError):
        radial_spectrum(np.full((8, 8), np.nan))
    with pytest.raises(DataError):
        ensemble_mean_spectrum([])


def test_ensemble_mean_examples():
    f = noise(4, 16, 16)
    single = ensemble_mean_spectrum([f])
    np.testing.assert_array_equal(single.energy, radial_spectrum(f).energy)
    np.testing.assert_array_equal(ensemble_mean_spectrum([f, f]).energy, radial_spectrum(f).energy)
    x = np.arange(32)
    a = np.cos(2 * np.pi * 3 * x / 32)[None, :] * np.ones((32, 1))
    b = np.cos(2 * np.pi * 7 * x / 32)[:, None] * np.ones((1, 32))
    mean = ensemble_mean_spectrum([a, b])
    sa, sb = radial_spectrum(a), radial_spectrum(b)
    np.testing.assert_allclose(mean.energy[2], sa.energy[2] / 2)
    np.testing.assert_allclose(mean.energy[6], sb.energy[6] / 2)


def test_high_wavenumber_energy():
    x = np.arange(16)
    low = np.cos(2 * np.pi * 2 * x / 16)[None, :] * np.ones((16, 1))
    high = np.cos(2 * np.pi * 6 * x / 16)[None, :] * np.ones((16, 1))
    assert high_wavenumber_energy(radial_spectrum(low)) == pytest.approx(0, abs=1e-20)
    assert high_wavenumber_energy(radial_spectrum(high)) == pytest.approx(high.var())
