"""Physically meaningful quantities from identified discrete models:
continuous-time conversion, modal parameters, frequency-dependent
nonlinear coefficients and restoring-force curves.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import BasisTerm, ModelError

__all__ = [
    "ContinuousModel",
    "Mode",
    "ModalParameters",
    "NonlinearCoefficientEstimate",
    "PhysicalReport",
    "to_continuous",
    "rediscretize",
    "modal_parameters",
    "nonlinear_coefficients",
    "restoring_force_curve",
]


class ConversionError(RuntimeError):
    """Discrete to continuous conversion is not defined for this model."""


@dataclass(frozen=True)
class ContinuousModel:
    """Zero-order-hold continuous equivalent of a discrete model."""

    Ac: np.ndarray
    Bc_ext: np.ndarray
    C: np.ndarray
    Dext: np.ndarray
    ts: float  # sample period of origin

    def transfer_matrix(self, omega):
        """Extended transfer matrix C (jw I - Ac)^-1 Bc_ext + Dext on the
        given angular frequencies; shape (F, l, m+s)."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        n = self.Ac.shape[0]
        eye = np.eye(n)
        zI_A = 1j * omega[:, None, None] * eye[None] - self.Ac[None]
        T = np.linalg.solve(zI_A, np.broadcast_to(
            self.Bc_ext, (omega.size,) + self.Bc_ext.shape).astype(complex))
        return np.matmul(self.C, T) + self.Dext[None]


def to_continuous(model):
    """Principal-logarithm conversion assuming zero-order hold:
    ``Ac = log(A)/ts`` and ``Bc = Ac (A - I)^-1 Bext``.

    Raises ConversionError when A has eigenvalues on the closed negative
    real axis (no principal logarithm) or at one (DC pole).
    """
    A = model.A
    eig = np.linalg.eigvals(A)
    bad = [ev for ev in eig
           if abs(ev.imag) <= 1e-12 * max(abs(ev), 1.0) and ev.real <= 0]
    if bad:
        raise ConversionError(
            f"matrix logarithm undefined: eigenvalues on the closed "
            f"negative real axis: {bad}")
    if np.any(np.abs(eig - 1.0) < 1e-12):
        raise ConversionError("eigenvalue at 1: A - I is singular")
    Ac = scipy.linalg.logm(A) / model.ts
    if np.max(np.abs(Ac.imag)) > 1e-8 * max(np.max(np.abs(Ac.real)), 1.0):
        raise ConversionError("matrix logarithm is not real")
    Ac = Ac.real
    Bc = Ac @ np.linalg.solve(A - np.eye(A.shape[0]), model.Bext)
    return ContinuousModel(Ac=Ac, Bc_ext=Bc, C=model.C.copy(),
                           Dext=model.Dext.copy(), ts=model.ts)


def rediscretize(cm, ts=None):
    """Zero-order-hold discretization of a continuous model; the round
    trip through :func:`to_continuous` reproduces the discrete matrices.

    Uses the augmented exponential, so a singular Ac is fine.
    """
    ts = cm.ts if ts is None else ts
    n, me = cm.Bc_ext.shape
    aug = np.zeros((n + me, n + me))
    aug[:n, :n] = cm.Ac
    aug[:n, n:] = cm.Bc_ext
    phi = scipy.linalg.expm(aug * ts)
    return phi[:n, :n], phi[:n, n:]


@dataclass(frozen=True)
class Mode:
    frequency_hz: float
    damping_ratio: float
    pole: complex


@dataclass(frozen=True)
class ModalParameters:
    modes: tuple
    real_poles: tuple = ()


def modal_parameters(Ac):
    """Natural frequencies and damping ratios of a continuous state matrix.

    Complex-conjugate pairs are deduplicated (positive-imaginary member
    kept) and sorted by frequency; purely real eigenvalues are reported
    separately as overdamped poles.
    """
    Ac = np.asarray(Ac, dtype=float)
    eig = np.linalg.eigvals(Ac)
    modes = []
    real_poles = []
    for ev in eig:
        if ev.imag > 1e-10 * max(abs(ev), 1.0):
            mag = abs(ev)
            modes.append(Mode(frequency_hz=mag / (2 * np.pi),
                              damping_ratio=-ev.real / mag, pole=ev))
        elif abs(ev.imag) <= 1e-10 * max(abs(ev), 1.0):
            real_poles.append(float(ev.real))
    modes.sort(key=lambda m: m.frequency_hz)
    return ModalParameters(tuple(modes), tuple(real_poles))


@dataclass(frozen=True)
class NonlinearCoefficientEstimate:
    """Frequency-dependent complex estimate of one physical coefficient."""

    term: BasisTerm
    lines: np.ndarray
    freq_hz: np.ndarray
    values: np.ndarray           # complex, excluded lines dropped
    excluded_lines: np.ndarray
    real_average: float
    real_min: float
    real_max: float
    imag_real_ratio: float

    @property
    def real_spread(self):
        return self.real_max - self.real_min


def nonlinear_coefficients(model, band, row=None, col=0, denom_rtol=1e-8):
    """Physical nonlinear coefficients as transfer-matrix ratios.

    The extended transfer matrix of the zero-order-hold continuous
    equivalent is evaluated on the processed lines; each coefficient is
    the negated ratio of the column driven by its basis signal to the
    column driven by the physical force input (the basis feedback carries
    a minus sign relative to the restoring-force convention). For a
    co-located SISO setup row 0 / column 0 applies; for multi-output
    models the row defaults to each term's own channel.

    Lines where the force-column magnitude falls below ``denom_rtol``
    times its maximum are excluded from the estimate and from the
    spectral average of the real part.
    """
    basis = model.basis
    if basis.size == 0:
        return ()
    if basis.has_velocity:
        raise ModelError("coefficient extraction expects displacement "
                         "basis terms")
    cm = to_continuous(model)
    lines = band.lines
    omega = 2 * np.pi * lines * model.fs / band.n_period
    G = cm.transfer_matrix(omega)
    m = model.dims.n_inputs
    out = []
    for a, term in enumerate(basis.terms):
        r = term.channel if row is None else row
        den = G[:, r, col]
        num = G[:, r, m + a]
        weak = np.abs(den) < denom_rtol * np.abs(den).max(initial=0.0)
        c = -num[~weak] / den[~weak]
        if c.size == 0:
            raise ConversionError("all lines excluded: force column is "
                                  "numerically zero")
        avg = float(np.mean(c.real))
        ratio = float(np.max(np.abs(c.imag)) / max(abs(avg), 1e-300))
        out.append(NonlinearCoefficientEstimate(
            term=term, lines=lines[~weak],
            freq_hz=lines[~weak] * model.fs / band.n_period,
            values=c, excluded_lines=lines[weak],
            real_average=avg, real_min=float(np.min(c.real)),
            real_max=float(np.max(c.real)), imag_real_ratio=ratio))
    return tuple(out)


def restoring_force_curve(coefficients, basis, grid):
    """Synthesized restoring force ``f(y) = sum c_a y**p_a`` on a grid.

    All terms must be displacement monomials on one shared channel.
    """
    grid = np.asarray(grid, dtype=float)
    if basis.size != len(coefficients):
        raise ModelError("one coefficient per basis term required")
    channels = basis.nl_channels
    if len(channels) > 1:
        raise ModelError("restoring-force synthesis needs a single-channel "
                         "basis")
    if basis.has_velocity:
        raise ModelError("restoring-force synthesis needs displacement "
                         "terms")
    f = np.zeros_like(grid)
    for c, term in zip(coefficients, basis.terms):
        if isinstance(term, BasisTerm):
            f = f + c * grid ** term.exponent
        else:
            f = f + c * np.array([term.func(v) for v in grid])
    return f


@dataclass(frozen=True)
class PhysicalReport:
    """Modal table plus nonlinear-coefficient summaries of one model."""

    modal: ModalParameters
    coefficients: tuple

    def to_json(self):
        doc = {
            "modes": [{"frequency_hz": m.frequency_hz,
                       "damping_ratio": m.damping_ratio}
                      for m in self.modal.modes],
            "real_poles": list(self.modal.real_poles),
            "coefficients": [
                {"channel": c.term.channel, "exponent": c.term.exponent,
                 "average": c.real_average, "min": c.real_min,
                 "max": c.real_max, "imag_real_ratio": c.imag_real_ratio,
                 "n_lines": int(c.lines.size),
                 "n_excluded": int(c.excluded_lines.size)}
                for c in self.coefficients],
        }
        return json.dumps(doc, indent=1)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def save_coefficient_spectra(self, path):
        """CSV `freq_hz,term,re,im` of the per-line estimates."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "term", "re", "im"])
            for c in self.coefficients:
                name = f"y{c.term.channel + 1}^{c.term.exponent}"
                for f, v in zip(c.freq_hz, c.values):
                    w.writerow([repr(float(f)), name, repr(float(v.real)),
                                repr(float(v.imag))])

    def save_force_curve(self, path, basis, grid):
        """CSV `y,f` of the synthesized restoring force on a grid."""
        coeffs = [c.real_average for c in self.coefficients]
        f = restoring_force_curve(coeffs, basis, grid)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "f"])
            for yi, fi in zip(grid, f):
                w.writerow([repr(float(yi)), repr(float(fi))])
