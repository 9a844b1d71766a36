import numpy as np
import pytest

from greyboxid.model import BasisSet
from greyboxid.signals import (ExcitedBand, SignalError, TimeRecord, dft,
                               differentiate_periodic, estimate_frf,
                               generate_multisine, load_time_record,
                               noise_variance, period_dft, period_idft,
                               rms, save_spectra, save_time_record,
                               z_of_lines)
from conftest import random_stable_model


def _record(u, y, fs, N):
    u = np.atleast_2d(u)
    y = np.atleast_2d(y)
    return TimeRecord(u=u, y=y, fs=fs, n_period=N,
                      n_periods=u.shape[1] // N)


def test_single_line_multisine_is_scaled_cosine():
    N = 256
    band = ExcitedBand(5, 5, N)
    u = generate_multisine(band, fs=256.0, n_period=N, rms_level=1.0, seed=3)
    assert abs(rms(u) - 1.0) < 1e-13
    # RMS of a cosine is amplitude/sqrt(2): the single line carries
    # amplitude sqrt(2), i.e. sqrt(2)/2 at +k with the 1/N scaling
    X = period_dft(u[None, :], N)[0, 0]
    assert abs(abs(X[5]) - np.sqrt(2) / 2) < 1e-12
    others = np.delete(np.abs(X), [5, N - 5])
    assert others.max() < 1e-12


def test_multisine_flat_spectrum_silverbox_band():
    fs, N = 2441.0, 8192
    band = ExcitedBand.from_hz(0.0, 300.0, fs, N)
    assert band.k_min == 1
    assert band.k_max == int(np.floor(300.0 * N / fs)) == 1006
    u = generate_multisine(band, fs, N, rms_level=0.1, seed=11)
    assert abs(rms(u) - 0.1) < 1e-13
    X = period_dft(u[None, :], N)[0, 0]
    mags = np.abs(X[band.lines])
    assert mags.std() / mags.mean() < 1e-12
    outside = np.abs(X[band.k_max + 1:N // 2])
    assert outside.max() < 1e-12 * mags.mean()


def test_multisine_determinism():
    band = ExcitedBand(1, 50, 512)
    a = generate_multisine(band, 512.0, 512, 1.0, seed=42)
    b = generate_multisine(band, 512.0, 512, 1.0, seed=42)
    c = generate_multisine(band, 512.0, 512, 1.0, seed=43)
    np.testing.assert_array_equal(a, b)
    assert np.max(np.abs(a - c)) > 1e-3


def test_multisine_rms_exact(rng):
    band = ExcitedBand.from_hz(10.0, 40.0, 200.0, 1024)
    for seed in range(5):
        u = generate_multisine(band, 200.0, 1024, 0.35, seed)
        assert abs(rms(u) - 0.35) <= 1e-12 * 0.35


def test_dft_of_cosine_and_constant():
    N = 128
    n = np.arange(N)
    x = np.cos(2 * np.pi * 7 * n / N)
    X = period_dft(x[None, :], N)[0, 0]
    assert abs(X[7] - 0.5) < 1e-12
    assert abs(X[3]) < 1e-14
    const = period_dft(np.full((1, N), 2.5), N)[0, 0]
    assert abs(const[0] - 2.5) < 1e-12
    assert np.abs(const[1:]).max() < 1e-12


def test_dft_idft_round_trip(rng):
    x = rng.standard_normal((3, 4 * 64))
    X = period_dft(x, 64)
    back = period_idft(X)
    np.testing.assert_allclose(back, x, atol=1e-10)


def test_dft_averages_periods(rng):
    N = 64
    one = rng.standard_normal((1, N))
    rec = _record(np.tile(one, (1, 3)), np.tile(one, (1, 3)), 64.0, N)
    band = ExcitedBand(1, 20, N)
    u_spec, y_spec = dft(rec, band)
    single = period_dft(one, N)[0, 0, band.lines]
    np.testing.assert_allclose(u_spec.values[0], single, atol=1e-13)
    np.testing.assert_allclose(y_spec.values[0], single, atol=1e-13)
    with pytest.raises(SignalError):
        dft(rec, band, periods=[5])


def test_z_convention():
    z = z_of_lines([1, 4], 8)
    np.testing.assert_allclose(z, [np.exp(2j * np.pi / 8),
                                   np.exp(2j * np.pi * 4 / 8)])
    spec = dft(_record(np.ones((1, 8)), np.ones((1, 8)), 8.0, 8),
               np.array([2]))[0]
    np.testing.assert_allclose(spec.z, [np.exp(2j * np.pi * 2 / 8)])


def test_parseval():
    band = ExcitedBand.from_hz(5.0, 60.0, 256.0, 1024)
    u = generate_multisine(band, 256.0, 1024, 0.7, seed=1)
    X = period_dft(u[None, :], 1024)[0, 0]
    # with the 1/N scaling the squared RMS equals the sum over all lines
    assert abs(np.sum(np.abs(X) ** 2) - rms(u) ** 2) < 1e-10 * rms(u) ** 2


def test_periodicity_invariant():
    band = ExcitedBand.from_hz(1.0, 50.0, 128.0, 256)
    u = generate_multisine(band, 128.0, 256, 1.0, seed=9)
    tiled = np.tile(u, 4)
    X = period_dft(tiled[None, :], 256)[0]
    for p in range(1, 4):
        np.testing.assert_allclose(X[p], X[0], atol=1e-12)


def test_noise_variance_zero_for_periodic(rng):
    N = 128
    u = rng.standard_normal(N)
    rec = _record(np.tile(u, 5)[None, :], np.tile(u, 5)[None, :], 128.0, N)
    nm = noise_variance(rec)
    assert np.max(nm.variance) < 1e-28


def test_noise_variance_calibration(rng):
    # white noise of variance sigma^2: per-line variance of the averaged
    # spectrum is sigma^2 / (N * P)
    N, P, sigma = 64, 4, 0.3
    estimates = []
    for _ in range(100):
        y = sigma * rng.standard_normal((1, N * P))
        rec = _record(np.zeros((1, N * P)), y, 64.0, N)
        nm = noise_variance(rec, lines=np.arange(1, N // 2))
        estimates.append(np.mean(nm.variance))
    expected = sigma ** 2 / (N * P)
    assert abs(np.mean(estimates) - expected) < 0.1 * expected


def test_noise_variance_periodic_shift_invariance(rng):
    N, P = 64, 4
    noise = rng.standard_normal((1, N * P))
    periodic = np.tile(rng.standard_normal(N), P)[None, :]
    lines = np.arange(1, 32)
    a = noise_variance(_record(np.zeros((1, N * P)), noise, 1.0, N), lines)
    b = noise_variance(_record(np.zeros((1, N * P)), noise + periodic,
                               1.0, N), lines)
    np.testing.assert_allclose(a.variance, b.variance, rtol=1e-9,
                               atol=1e-16)


def test_noise_variance_needs_two_periods(rng):
    rec = _record(np.zeros((1, 64)), rng.standard_normal((1, 64)), 1.0, 64)
    with pytest.raises(SignalError):
        noise_variance(rec)


def test_frf_constant_ratio(rng):
    N = 128
    band = ExcitedBand(1, 40, N)
    u = generate_multisine(band, 128.0, N, 1.0, seed=2)[None, :]
    rec = _record(u, 2.0 * u, 128.0, N)
    u_spec, y_spec = dft(rec, band)
    frf, weak = estimate_frf(u_spec, y_spec)
    assert not weak.any()
    np.testing.assert_allclose(frf[0], 2.0, rtol=1e-10)


def test_frf_matches_linear_transfer_function(rng):
    from greyboxid.simulate import run_to_steady_state
    model = random_stable_model(rng, n_states=3, degrees=())
    N = 512
    band = ExcitedBand(1, 100, N)
    u = generate_multisine(band, model.fs, N, 0.5, seed=5)[None, :]
    rec, steadiness, _ = run_to_steady_state(model, u, 40, 1)
    assert steadiness < 1e-10
    u_spec, y_spec = dft(rec, band)
    frf, _ = estimate_frf(u_spec, y_spec)
    G = model.transfer_matrix(y_spec.z)[:, 0, 0]
    np.testing.assert_allclose(frf[0], G, rtol=1e-8)


def test_frf_weak_input_flagged():
    N = 64
    lines = np.array([3, 5])
    from greyboxid.signals import SpectrumSet
    u = SpectrumSet(lines, np.array([[1.0, 1e-15]]), N, 64.0)
    y = SpectrumSet(lines, np.array([[2.0, 1.0]]), N, 64.0)
    frf, weak = estimate_frf(u, y, rel_threshold=1e-12)
    assert weak.tolist() == [False, True]
    assert np.isnan(frf[0, 1].real)


def test_differentiate_periodic_cosine():
    N, fs = 256, 512.0
    k = 7
    t = np.arange(N) / fs
    f = k * fs / N
    x = np.cos(2 * np.pi * f * t + 0.4)
    xd = differentiate_periodic(x[None, :], N, fs)[0]
    expected = -2 * np.pi * f * np.sin(2 * np.pi * f * t + 0.4)
    np.testing.assert_allclose(xd, expected, rtol=1e-9, atol=1e-9)


def test_excited_band_validation():
    with pytest.raises(SignalError):
        ExcitedBand(0, 10, 64)
    with pytest.raises(SignalError):
        ExcitedBand(5, 32, 64)
    band = ExcitedBand(1, 10, 64, excluded=(3, 4))
    assert 3 not in band.lines and 4 not in band.lines
    assert band.lines.size == 8


def test_record_split_and_selection(rng):
    N = 32
    u = rng.standard_normal((1, N * 5))
    y = rng.standard_normal((2, N * 5))
    rec = _record(u, y, 32.0, N)
    est, val = rec.split_validation(2)
    assert est.n_periods == 3 and val.n_periods == 2
    np.testing.assert_array_equal(val.y[:, :N], y[:, 3 * N:4 * N])
    with pytest.raises(SignalError):
        rec.split_validation(5)


def test_time_record_csv_round_trip(tmp_path, rng):
    N = 16
    rec = _record(rng.standard_normal((2, N * 2)),
                  rng.standard_normal((1, N * 2)), 100.0, N)
    path = tmp_path / "rec.csv"
    save_time_record(path, rec)
    back = load_time_record(path)
    np.testing.assert_array_equal(back.u, rec.u)
    np.testing.assert_array_equal(back.y, rec.y)
    assert back.fs == rec.fs
    assert back.n_period == N and back.n_periods == 2
    header = path.read_text().splitlines()[0]
    assert header == "time,u1,u2,y1"


def test_spectra_csv(tmp_path):
    from greyboxid.signals import SpectrumSet
    spec = SpectrumSet(np.array([1, 3]), np.array([[1 + 2j, -0.5j]]), 64,
                       64.0)
    path = tmp_path / "spec.csv"
    save_spectra(path, spec)
    lines = path.read_text().splitlines()
    assert lines[0] == "line,freq_hz,channel,re,im"
    assert lines[1].startswith("1,1.0,ch1,1.0,2.0")
