"""Discrete-time simulation of grey-box models and continuous-time
integration of physical truth systems.

Identified models are simulated exactly as written, in discrete time.
Truth systems are integrated with fixed-step RK4 at an oversampled rate
and decimated, so that the benchmark data never shares the model's
discretization.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import (BasisSet, BasisTerm, GreyBoxModel, ModelError,
                    eval_basis)
from .signals import TimeRecord

__all__ = [
    "PhysicalTerm",
    "PhysicalSystem",
    "SimulationOutput",
    "simulate_discrete",
    "simulate_newton",
    "run_to_steady_state",
    "resample_periodic",
    "make_duffing_system",
    "make_two_dof_system",
    "save_physical_system",
    "load_physical_system",
]


class SimulationError(RuntimeError):
    """Implicit solve failure or invalid simulation input."""


@dataclass(frozen=True)
class PhysicalTerm:
    """One localized restoring-force term ``coefficient * g(y, ydot)``
    entering the Newton equation at the given row (defaults to the DOF the
    basis term reads)."""

    coefficient: float
    term: BasisTerm
    row: int = None

    @property
    def effective_row(self):
        return self.term.channel if self.row is None else self.row


@dataclass(frozen=True)
class PhysicalSystem:
    """Mass/damping/stiffness system with localized nonlinear terms:

        M y'' + Cv y' + K y + sum_a c_a g_a(y, y') = input_map u(t)
    """

    M: np.ndarray
    Cv: np.ndarray
    K: np.ndarray
    terms: tuple = ()
    input_map: np.ndarray = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        Cv = np.atleast_2d(np.asarray(self.Cv, dtype=float))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        n = M.shape[0]
        if M.shape != (n, n) or Cv.shape != (n, n) or K.shape != (n, n):
            raise ModelError("M, Cv, K must be square and equally sized")
        fmap = self.input_map
        if fmap is None:
            fmap = np.eye(n)[:, :1]
        fmap = np.atleast_2d(np.asarray(fmap, dtype=float))
        if fmap.shape[0] != n:
            raise ModelError("input_map must have one row per DOF")
        if abs(np.linalg.det(M)) < 1e-300:
            raise ModelError("mass matrix is singular")
        for a in (M, Cv, K, fmap):
            a.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "Cv", Cv)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "input_map", fmap)
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if t.term.channel >= n or t.effective_row >= n:
                raise ModelError(f"term {t} addresses a DOF out of range")

    @property
    def n_dof(self):
        return self.M.shape[0]

    @property
    def n_inputs(self):
        return self.input_map.shape[1]


@dataclass(frozen=True)
class SimulationOutput:
    """State/output trajectories plus a divergence flag (never an
    exception: unstable trial models must fail fast and recoverably)."""

    x: np.ndarray  # (n_states, T)
    y: np.ndarray  # (n_outputs, T)
    ok: bool
    first_bad: int = -1
    iterations: int = 0


def _check_finite_input(u):
    if not np.isfinite(u).all():
        raise SimulationError("input contains NaN or inf")


def simulate_discrete(model, u, x0=None, div_bound=1e8,
                      fixed_point_tol=1e-12, max_fixed_point=50):
    """Simulate a grey-box model sample by sample.

    Parameters
    ----------
    model : GreyBoxModel
    u : ndarray(m, T)
    x0 : initial state, zeros by default.
    div_bound : state magnitude that aborts the run with a flag.

    Returns
    -------
    SimulationOutput

    Velocity-dependent basis terms are rejected: the discrete recursion
    produces no output derivative to feed them.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    _check_finite_input(u)
    dims = model.dims
    if u.shape[0] != dims.n_inputs:
        raise SimulationError(
            f"input has {u.shape[0]} channels, model expects {dims.n_inputs}")
    if model.basis.has_velocity:
        raise ModelError(
            "velocity basis terms cannot be simulated by the discrete "
            "recursion (data-side regressors only)")
    x0 = np.zeros(dims.n_states) if x0 is None else \
        np.asarray(x0, dtype=float)

    if model.basis.is_monomial and model.output_feedback_is_explicit():
        chan = np.array([t.channel for t in model.basis.terms], dtype=np.int64)
        expo = np.array([t.exponent for t in model.basis.terms],
                        dtype=np.int64)
        x, y, _, ok, bad = _kernels.simulate_greybox(
            np.ascontiguousarray(model.A), np.ascontiguousarray(model.B),
            np.ascontiguousarray(model.E), np.ascontiguousarray(model.C),
            np.ascontiguousarray(model.D), np.ascontiguousarray(model.F),
            np.ascontiguousarray(u.T), chan, expo, x0, float(div_bound))
        return SimulationOutput(x.T, y.T, ok, bad)
    return _simulate_reference(model, u, x0, div_bound, fixed_point_tol,
                               max_fixed_point)


def _simulate_reference(model, u, x0, div_bound=1e8, tol=1e-12, max_iter=50):
    """Pure-Python reference recursion; handles custom basis functions and
    implicit output feedback (damped fixed point on the output sample)."""
    dims = model.dims
    T = u.shape[1]
    x = np.zeros((dims.n_states, T))
    y = np.zeros((dims.n_outputs, T))
    explicit = model.output_feedback_is_explicit()
    xt = x0.copy()
    iters = 0
    F = model.F
    for t in range(T):
        x[:, t] = xt
        base = model.C @ xt + model.D @ u[:, t]
        if dims.n_terms == 0:
            yt = base
            g = np.zeros(0)
        elif explicit:
            g = eval_basis(model.basis, base)
            yt = base + F @ g
        else:
            yt = base.copy()
            for it in range(max_iter):
                g = eval_basis(model.basis, yt)
                ynew = yt + 1.0 * (base + F @ g - yt)
                step = np.max(np.abs(ynew - yt))
                yt = ynew
                iters += 1
                if step <= tol * max(1.0, np.max(np.abs(yt))):
                    break
            else:
                raise SimulationError(
                    f"implicit output equation failed to converge at "
                    f"sample {t}")
            g = eval_basis(model.basis, yt)
        y[:, t] = yt
        xt = model.A @ xt + model.B @ u[:, t]
        if dims.n_terms:
            xt = xt + model.E @ g
        if not np.max(np.abs(xt)) <= div_bound:
            return SimulationOutput(x, y, False, t, iters)
    return SimulationOutput(x, y, True, -1, iters)


def resample_periodic(x, factor):
    """Band-limited resampling of a periodic sample block by zero-padding
    its spectrum. Exact for signals whose content lies below Nyquist."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, T = x.shape
    X = np.fft.fft(x, axis=1)
    Tf = T * factor
    Xf = np.zeros((m, Tf), dtype=complex)
    half = T // 2
    if T % 2 == 0:
        Xf[:, :half] = X[:, :half]
        Xf[:, half] = 0.5 * X[:, half]
        Xf[:, Tf - half] = 0.5 * X[:, half]
        Xf[:, Tf - half + 1:] = X[:, half + 1:]
    else:
        Xf[:, :half + 1] = X[:, :half + 1]
        Xf[:, Tf - half:] = X[:, half + 1:]
    return np.real(np.fft.ifft(Xf, axis=1)) * factor


def _half_step_input(u, oversample, interp):
    """Input samples on the RK4 half-step grid, wrapping periodically."""
    m, T = u.shape
    n_fine = 2 * oversample * T
    if interp == "bandlimited":
        fine = resample_periodic(u, 2 * oversample)
    elif interp == "zoh":
        idx = (np.arange(n_fine) // (2 * oversample)) % T
        fine = u[:, idx]
    else:
        raise SimulationError(f"unknown interpolation {interp!r}")
    out = np.empty((n_fine + 1, m))
    out[:n_fine] = fine.T
    out[n_fine] = fine[:, 0]
    return out


def _term_arrays(terms):
    coef = np.array([t.coefficient for t in terms], dtype=float)
    rows = np.array([t.effective_row for t in terms], dtype=np.int64)
    chan = np.array([t.term.channel for t in terms], dtype=np.int64)
    expo = np.array([t.term.exponent for t in terms], dtype=np.int64)
    vel = np.array([t.term.velocity for t in terms], dtype=np.bool_)
    return coef, rows, chan, expo, vel


def simulate_newton(sys, u, fs, oversample=20, interp="bandlimited",
                    x0=None, include_velocity=False, div_bound=1e8):
    """Integrate a physical system driven by a sampled force record.

    The force is interpolated onto the fine grid (band-limited by default,
    which is exact for multisines; ``interp='zoh'`` holds each sample),
    integrated with RK4 at ``oversample`` times the output rate and
    decimated back to ``fs``. The record is treated as one period of a
    periodic signal for interpolation purposes.

    Returns
    -------
    (TimeRecord or None, SimulationOutput)
        The record holds displacements (and velocities as extra output
        channels when requested); it is None when the run diverged.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    _check_finite_input(u)
    if u.shape[0] != sys.n_inputs:
        raise SimulationError(
            f"input has {u.shape[0]} channels, system expects "
            f"{sys.n_inputs}")
    if oversample < 1:
        raise SimulationError("oversample must be >= 1")
    T = u.shape[1]
    n_steps = T * oversample
    h = 1.0 / (fs * oversample)
    q0 = np.zeros(2 * sys.n_dof) if x0 is None else np.asarray(x0, float)
    u_half = _half_step_input(u, oversample, interp)
    coef, rows, chan, expo, vel = _term_arrays(sys.terms)
    Minv = np.linalg.inv(sys.M)
    disp, velo, ok, bad = _kernels.newton_rk4(
        np.ascontiguousarray(Minv), np.ascontiguousarray(sys.Cv),
        np.ascontiguousarray(sys.K), np.ascontiguousarray(sys.input_map),
        coef, rows, chan, expo, vel, u_half, h, n_steps, oversample, q0,
        float(div_bound))
    state = np.vstack([disp.T, velo.T])
    sim = SimulationOutput(state, disp.T, ok, bad)
    if not ok:
        return None, sim
    y = np.vstack([disp.T, velo.T]) if include_velocity else disp.T
    record = TimeRecord(u=u, y=y, fs=fs, n_period=T, n_periods=1)
    return record, sim


def run_to_steady_state(obj, u_period, n_transient, n_keep, fs=None,
                        warn_threshold=1e-6, **kwargs):
    """Simulate ``n_transient + n_keep`` periods of a periodic excitation
    from rest and keep the trailing periods.

    Works for both GreyBoxModel (discrete recursion) and PhysicalSystem
    (RK4 + decimation). The steadiness metric is the maximum difference
    between the last two simulated periods relative to the signal peak.

    Returns
    -------
    (TimeRecord, steadiness, flagged)
    """
    u_period = np.atleast_2d(np.asarray(u_period, dtype=float))
    N = u_period.shape[1]
    total = n_transient + n_keep
    if n_keep < 1:
        raise SimulationError("must keep at least one period")
    u_full = np.tile(u_period, (1, total))
    if isinstance(obj, GreyBoxModel):
        fs = obj.fs
        sim = simulate_discrete(obj, u_full, **kwargs)
        if not sim.ok:
            raise SimulationError(
                f"simulation diverged at sample {sim.first_bad}")
        y_full = sim.y
    elif isinstance(obj, PhysicalSystem):
        if fs is None:
            raise SimulationError("fs is required for a PhysicalSystem")
        record, sim = simulate_newton(obj, u_full, fs, **kwargs)
        if record is None:
            raise SimulationError(
                f"integration diverged near sample {sim.first_bad}")
        y_full = record.y
    else:
        raise TypeError(f"cannot simulate {type(obj).__name__}")

    y_per = y_full.reshape(y_full.shape[0], total, N)
    if total >= 2:
        diff = np.max(np.abs(y_per[:, -1] - y_per[:, -2]))
        scale = max(np.max(np.abs(y_per[:, -1])), 1e-300)
        steadiness = diff / scale
    else:
        steadiness = np.nan
    kept = y_per[:, n_transient:].reshape(y_full.shape[0], -1)
    record = TimeRecord(u=np.tile(u_period, (1, n_keep)), y=kept, fs=fs,
                        n_period=N, n_periods=n_keep)
    return record, steadiness, bool(steadiness > warn_threshold)


# ---------------------------------------------------------------------------
# Benchmark system builders and JSON persistence.

def make_duffing_system(fn_hz, damping_ratio, mass, quadratic, cubic):
    """Single-DOF oscillator with quadratic + cubic stiffness, specified by
    its underlying linear modal parameters."""
    wn = 2 * np.pi * fn_hz
    M = np.array([[mass]])
    K = np.array([[mass * wn ** 2]])
    Cv = np.array([[2 * damping_ratio * mass * wn]])
    terms = []
    if quadratic:
        terms.append(PhysicalTerm(quadratic, BasisTerm(0, 2)))
    if cubic:
        terms.append(PhysicalTerm(cubic, BasisTerm(0, 3)))
    return PhysicalSystem(M, Cv, K, tuple(terms), np.array([[1.0]]))


def make_two_dof_system(m1, m2, k1, k2, k3, cv1, cv2, cv3, cubic=0.0):
    """Two-mass chain with an optional cubic spring grounding mass 2."""
    M = np.diag([m1, m2])
    K = np.array([[k1 + k2, -k2], [-k2, k2 + k3]])
    Cv = np.array([[cv1 + cv2, -cv2], [-cv2, cv2 + cv3]])
    terms = (PhysicalTerm(cubic, BasisTerm(1, 3)),) if cubic else ()
    return PhysicalSystem(M, Cv, K, terms, np.array([[1.0], [0.0]]))


def save_physical_system(path, sys):
    doc = {
        "M": sys.M.tolist(), "Cv": sys.Cv.tolist(), "K": sys.K.tolist(),
        "input_map": sys.input_map.tolist(),
        "terms": [{"coefficient": t.coefficient, "row": t.effective_row,
                   "channel": t.term.channel, "exponent": t.term.exponent,
                   "velocity": t.term.velocity} for t in sys.terms],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_physical_system(path):
    with open(path) as fh:
        doc = json.load(fh)
    terms = tuple(
        PhysicalTerm(float(t["coefficient"]),
                     BasisTerm(int(t["channel"]), int(t["exponent"]),
                               bool(t.get("velocity", False))),
                     int(t["row"]))
        for t in doc.get("terms", ()))
    return PhysicalSystem(np.array(doc["M"]), np.array(doc["Cv"]),
                          np.array(doc["K"]), terms,
                          np.array(doc["input_map"]))
