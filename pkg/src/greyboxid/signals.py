"""Periodic excitation design, DFT bookkeeping, noise variance and FRFs.

Conventions used across the whole package (asserted by the conformance
tests): the DFT of one period is scaled by 1/N, so a unit cosine at an
excited line k shows up as 0.5 at +k; the z-plane points attached to the
lines are ``z_k = exp(+2j*pi*k/N)``.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TimeRecord",
    "ExcitedBand",
    "SpectrumSet",
    "NoiseModel",
    "generate_multisine",
    "period_dft",
    "period_idft",
    "dft",
    "noise_variance",
    "estimate_frf",
    "differentiate_periodic",
    "z_of_lines",
    "rms",
    "save_time_record",
    "load_time_record",
    "save_spectra",
]


class SignalError(ValueError):
    """Inconsistent record, band or spectra."""


def rms(x, axis=None):
    return np.sqrt(np.mean(np.asarray(x, dtype=float) ** 2, axis=axis))


def z_of_lines(lines, n_period):
    """z-transform points of the DFT lines, ``exp(+2j*pi*k/N)``."""
    lines = np.asarray(lines)
    return np.exp(2j * np.pi * lines / n_period)


@dataclass(frozen=True)
class TimeRecord:
    """Multi-period sampled input/output data.

    u : ndarray(m, N*P), y : ndarray(l, N*P)
    fs : sampling rate in Hz
    n_period : samples per period N
    n_periods : period count P
    """

    u: np.ndarray
    y: np.ndarray
    fs: float
    n_period: int
    n_periods: int

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        u.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if self.fs <= 0:
            raise SignalError("fs must be positive")
        T = self.n_period * self.n_periods
        if u.shape[1] != T or y.shape[1] != T:
            raise SignalError(
                f"record length must be n_period*n_periods={T}, got "
                f"u:{u.shape[1]} y:{y.shape[1]}")

    @property
    def n_inputs(self):
        return self.u.shape[0]

    @property
    def n_outputs(self):
        return self.y.shape[0]

    @property
    def time(self):
        return np.arange(self.u.shape[1]) / self.fs

    def _check_periods(self, periods):
        if periods is None:
            return np.arange(self.n_periods)
        periods = np.atleast_1d(np.asarray(periods, dtype=int))
        if periods.size == 0:
            raise SignalError("empty period selection")
        if periods.min() < 0 or periods.max() >= self.n_periods:
            raise SignalError(
                f"period selection {periods} out of range "
                f"0..{self.n_periods - 1}")
        return periods

    def per_period(self, x):
        """View (channels, P, N) of a channel-major sample array."""
        ch = x.shape[0]
        return x.reshape(ch, self.n_periods, self.n_period)

    def keep_periods(self, periods):
        """New record containing only the selected periods (in order)."""
        periods = self._check_periods(periods)
        u = self.per_period(self.u)[:, periods, :].reshape(self.n_inputs, -1)
        y = self.per_period(self.y)[:, periods, :].reshape(self.n_outputs, -1)
        return TimeRecord(u, y, self.fs, self.n_period, len(periods))

    def split_validation(self, n_validation=1):
        """Split off the trailing periods as a validation record."""
        if not 0 < n_validation < self.n_periods:
            raise SignalError("need at least one period on each side")
        est = self.keep_periods(range(self.n_periods - n_validation))
        val = self.keep_periods(
            range(self.n_periods - n_validation, self.n_periods))
        return est, val


@dataclass(frozen=True)
class ExcitedBand:
    """Contiguous set of excited DFT lines, DC always excluded."""

    k_min: int
    k_max: int
    n_period: int
    excluded: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "excluded",
                           tuple(int(k) for k in self.excluded))
        if not 1 <= self.k_min <= self.k_max:
            raise SignalError("need 1 <= k_min <= k_max (DC is excluded)")
        if self.k_max >= self.n_period / 2:
            raise SignalError("k_max must stay below the Nyquist line N/2")

    @classmethod
    def from_hz(cls, f_min, f_max, fs, n_period, excluded=()):
        df = fs / n_period
        k_min = max(1, int(np.ceil(f_min / df - 1e-9)))
        k_max = int(np.floor(f_max / df + 1e-9))
        return cls(k_min, k_max, n_period, excluded)

    @property
    def lines(self):
        ks = np.arange(self.k_min, self.k_max + 1)
        if self.excluded:
            ks = ks[~np.isin(ks, self.excluded)]
        if ks.size == 0:
            raise SignalError("band excludes every line")
        return ks

    def freq_hz(self, fs):
        return self.lines * fs / self.n_period


@dataclass(frozen=True)
class SpectrumSet:
    """Complex DFT values of one signal group on a set of lines.

    values : ndarray(channels, F)
    """

    lines: np.ndarray
    values: np.ndarray
    n_period: int
    fs: float

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=int)
        values = np.atleast_2d(np.asarray(self.values, dtype=complex))
        lines.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "lines", lines)
        object.__setattr__(self, "values", values)
        if values.shape[1] != lines.size:
            raise SignalError("values must have one column per line")

    @property
    def n_lines(self):
        return self.lines.size

    @property
    def z(self):
        return z_of_lines(self.lines, self.n_period)

    @property
    def freq_hz(self):
        return self.lines * self.fs / self.n_period

    @property
    def omega(self):
        """Continuous angular frequencies of the lines (rad/s)."""
        return 2 * np.pi * self.freq_hz


@dataclass(frozen=True)
class NoiseModel:
    """Per-output, per-line variance of the mean spectrum."""

    lines: np.ndarray
    variance: np.ndarray  # (n_outputs, F), >= 0
    n_periods: int

    def __post_init__(self):
        object.__setattr__(self, "lines", np.asarray(self.lines, dtype=int))
        object.__setattr__(self, "variance",
                           np.atleast_2d(np.asarray(self.variance)))


def generate_multisine(band, fs, n_period, rms_level, seed):
    """One period of a random-phase multisine.

    Equal-amplitude cosines on the excited lines, phases i.i.d. uniform
    on [0, 2*pi); the period is rescaled so its RMS equals ``rms_level``.
    Deterministic for a fixed seed.
    """
    lines = band.lines
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2 * np.pi, size=lines.size)
    t = np.arange(n_period)
    signal = np.cos(2 * np.pi * lines[:, None] * t[None, :] / n_period
                    + phases[:, None]).sum(axis=0)
    actual = rms(signal)
    if actual == 0:
        raise SignalError("degenerate multisine (zero RMS)")
    return signal * (rms_level / actual)


def period_dft(x, n_period):
    """Per-period DFT with 1/N scaling.

    x : ndarray(channels, P*N) -> ndarray(channels, P, N) complex
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ch, T = x.shape
    if T % n_period:
        raise SignalError("sample count not divisible by the period length")
    per = x.reshape(ch, T // n_period, n_period)
    return np.fft.fft(per, axis=2) / n_period


def period_idft(X):
    """Inverse of :func:`period_dft`; returns the real sample array."""
    X = np.asarray(X, dtype=complex)
    n_period = X.shape[2]
    x = np.fft.ifft(X * n_period, axis=2)
    return np.real(x).reshape(X.shape[0], -1)


def dft(record, lines, periods=None):
    """Averaged input/output spectra of a record on the given lines.

    Parameters
    ----------
    record : TimeRecord
    lines : ExcitedBand or array of DFT line indices
    periods : selection of steady-state period indices (default: all)

    Returns
    -------
    (SpectrumSet, SpectrumSet)
        Input and output spectra, averaged across the selected periods.
    """
    if isinstance(lines, ExcitedBand):
        lines = lines.lines
    lines = np.asarray(lines, dtype=int)
    periods = record._check_periods(periods)
    out = []
    for x in (record.u, record.y):
        X = period_dft(x, record.n_period)[:, periods, :]
        avg = X.mean(axis=1)[:, lines]
        out.append(SpectrumSet(lines, avg, record.n_period, record.fs))
    return tuple(out)


def noise_variance(record, lines=None, periods=None):
    """Noise variance of the averaged output spectrum.

    Sample variance of the per-period DFT values on each line, divided by
    the period count (variance of the mean). Requires >= 2 periods. The
    estimate is invariant to any exactly periodic signal content.
    """
    periods = record._check_periods(periods)
    if periods.size < 2:
        raise SignalError("noise variance needs at least 2 periods")
    if lines is None:
        lines = np.arange(record.n_period // 2)
    elif isinstance(lines, ExcitedBand):
        lines = lines.lines
    lines = np.asarray(lines, dtype=int)
    Y = period_dft(record.y, record.n_period)[:, periods, :][:, :, lines]
    P = periods.size
    dev = Y - Y.mean(axis=1, keepdims=True)
    var = (np.abs(dev) ** 2).sum(axis=1) / (P - 1) / P
    return NoiseModel(lines, var, P)


def estimate_frf(u_spec, y_spec, rel_threshold=1e-12):
    """Frequency response functions by spectral division Y(k)/U(k).

    Single-input records only; each output channel is divided by the
    scalar input spectrum. Lines where the input magnitude falls below
    ``rel_threshold`` times its maximum are flagged (and returned as NaN).

    Returns
    -------
    frf : ndarray(n_outputs, F) complex
    weak : ndarray(F) bool
        True where the input was too small to divide by.
    """
    if u_spec.values.shape[0] != 1:
        raise SignalError("FRF estimation expects a single input channel")
    if not np.array_equal(u_spec.lines, y_spec.lines):
        raise SignalError("input and output spectra use different lines")
    U = u_spec.values[0]
    weak = np.abs(U) < rel_threshold * np.abs(U).max(initial=0.0)
    frf = np.full(y_spec.values.shape, np.nan, dtype=complex)
    frf[:, ~weak] = y_spec.values[:, ~weak] / U[~weak]
    return frf, weak


def differentiate_periodic(x, n_period, fs):
    """Time derivative of a periodic sampled signal via its spectrum.

    Multiplies each per-period DFT by j*omega_k (the derivative of the
    band-limited interpolation) and transforms back. The Nyquist bin has
    no well-defined derivative and is zeroed.
    """
    X = period_dft(x, n_period)
    w = 2j * np.pi * np.fft.fftfreq(n_period, d=1.0 / fs)
    if n_period % 2 == 0:
        w[n_period // 2] = 0.0
    return period_idft(X * w)


# ---------------------------------------------------------------------------
# File formats: sample CSV with a JSON sidecar, and a flat spectra CSV.

def save_time_record(path, record, meta_path=None, u_names=None,
                     y_names=None):
    """Write `time,u1..um,y1..yl` rows plus a metadata sidecar."""
    u_names = u_names or [f"u{i+1}" for i in range(record.n_inputs)]
    y_names = y_names or [f"y{i+1}" for i in range(record.n_outputs)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *u_names, *y_names])
        t = record.time
        for n in range(record.u.shape[1]):
            w.writerow([repr(float(t[n])),
                        *(repr(float(v)) for v in record.u[:, n]),
                        *(repr(float(v)) for v in record.y[:, n])])
    meta_path = meta_path or str(path) + ".json"
    meta = {"fs": record.fs, "n_period": record.n_period,
            "n_periods": record.n_periods,
            "u_names": u_names, "y_names": y_names}
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1)


def load_time_record(path, meta_path=None):
    meta_path = meta_path or str(path) + ".json"
    with open(meta_path) as fh:
        meta = json.load(fh)
    m, l = len(meta["u_names"]), len(meta["y_names"])
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    data = np.atleast_2d(data)
    if data.shape[1] != 1 + m + l:
        raise SignalError(
            f"CSV has {data.shape[1]} columns, metadata expects {1 + m + l}")
    return TimeRecord(u=data[:, 1:1 + m].T, y=data[:, 1 + m:].T,
                      fs=float(meta["fs"]), n_period=int(meta["n_period"]),
                      n_periods=int(meta["n_periods"]))


def save_spectra(path, spec, channel_names=None):
    """Flat CSV `line,freq_hz,channel,re,im`."""
    names = channel_names or [f"ch{i+1}" for i in range(spec.values.shape[0])]
    freq = spec.freq_hz
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["line", "freq_hz", "channel", "re", "im"])
        for i, name in enumerate(names):
            for j, k in enumerate(spec.lines):
                v = spec.values[i, j]
                w.writerow([k, repr(float(freq[j])), name,
                            repr(float(v.real)),
                            repr(float(v.imag))])
