"""Weighted least-squares refinement of all grey-box parameters.

The cost is a sum over processed frequency lines of weighted squared
output-spectrum errors; the residual is produced by simulating the model
over the periodic estimation input (with a transient warmup) and taking
the DFT of the final period. The Jacobian is computed analytically by
propagating, for every free parameter at once, an auxiliary sensitivity
recursion that shares the model dynamics and is forced by the base
trajectories; the nonlinear feedback enters through the basis gradient.
A Levenberg-Marquardt loop with real-valued normal equations drives the
parameters, and the returned model is the accepted iterate with the
smallest validation RMS.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import (GreyBoxModel, ModelError, basis_gradient,
                    eval_basis, pack_parameters, unpack_parameters,
                    ParameterMask)
from .signals import ExcitedBand, SpectrumSet, dft, period_dft
from .simulate import SimulationError, simulate_discrete

__all__ = [
    "CostSetup",
    "LmOptions",
    "LmState",
    "ValidationResult",
    "residual_spectrum",
    "cost",
    "jacobian",
    "lm_optimize",
    "validate",
    "save_trace",
]


@dataclass(frozen=True)
class CostSetup:
    """Frozen description of the estimation problem.

    u_period : one period of the (noise-free) excitation, (m, N).
    y_values : measured output spectra on the processed lines, (l, F).
    weight : None (identity), per-line scalars (F,), per-line diagonals
        (F, l) or per-line Hermitian PSD matrices (F, l, l).
    """

    u_period: np.ndarray
    y_values: np.ndarray
    lines: np.ndarray
    n_period: int
    fs: float
    template: GreyBoxModel
    mask: ParameterMask
    weight: object = None
    n_warmup: int = 3
    div_bound: float = 1e8

    def __post_init__(self):
        object.__setattr__(self, "u_period",
                           np.atleast_2d(np.asarray(self.u_period, float)))
        object.__setattr__(self, "y_values",
                           np.atleast_2d(np.asarray(self.y_values, complex)))
        object.__setattr__(self, "lines", np.asarray(self.lines, dtype=int))
        if self.template.basis.has_velocity:
            raise ModelError(
                "refinement simulates the model; velocity basis terms are "
                "not supported here")
        if self.u_period.shape[1] != self.n_period:
            raise ModelError("u_period must hold exactly one period")

    @classmethod
    def from_record(cls, record, template, band, mask=None, periods=None,
                    weight=None, n_warmup=3):
        """Estimation setup from a steady-state record: the input period is
        averaged across the selected periods (noise-free input assumption),
        the output spectra are period-averaged DFTs on the excited lines."""
        if mask is None:
            mask = ParameterMask.default(template.dims)
        lines = band.lines if isinstance(band, ExcitedBand) else \
            np.asarray(band, dtype=int)
        periods_idx = record._check_periods(periods)
        u_period = record.per_period(record.u)[:, periods_idx, :].mean(axis=1)
        _, y_spec = dft(record, lines, periods)
        return cls(u_period=u_period, y_values=y_spec.values, lines=lines,
                   n_period=record.n_period, fs=record.fs, template=template,
                   mask=mask, weight=weight, n_warmup=n_warmup)

    @property
    def n_lines(self):
        return self.lines.size

    @property
    def y_meas(self):
        return SpectrumSet(self.lines, self.y_values, self.n_period, self.fs)


def _weight_factor(setup):
    """Left factor L(k) with L^H L = W(k), or None for identity."""
    w = setup.weight
    if w is None:
        return None
    F = setup.n_lines
    l = setup.y_values.shape[0]
    w = np.asarray(w, dtype=float) if not np.iscomplexobj(w) else \
        np.asarray(w)
    if w.ndim == 0:
        return np.full(F, np.sqrt(float(w)))
    if w.shape == (F,):
        return np.sqrt(w.astype(float))
    if w.shape == (F, l):
        return np.sqrt(w.astype(float))
    if w.shape == (F, l, l):
        out = np.empty((F, l, l), dtype=complex)
        for k in range(F):
            vals, vecs = np.linalg.eigh(w[k])
            vals = np.clip(vals, 0.0, None)
            out[k] = np.sqrt(vals)[:, None] * vecs.conj().T
        return out
    raise ModelError(f"unsupported weight shape {np.shape(w)}")


def _apply_weight(L, arr):
    """Apply the weight factor to per-line residuals (F, l) or Jacobian
    slabs (F, l, n)."""
    if L is None:
        return arr
    if L.ndim == 1:
        return arr * L[:, None] if arr.ndim == 2 else arr * L[:, None, None]
    if L.ndim == 2:
        return arr * L if arr.ndim == 2 else arr * L[:, :, None]
    return np.einsum("fij,fj...->fi...", L, arr)


def _free_indices(mask):
    """(rows, cols) of the free entries of each matrix, in the packed
    column-major order."""
    out = []
    for m in (mask.A, mask.Bext, mask.C, mask.Dext):
        ji = np.argwhere(m.T)
        out.append((np.ascontiguousarray(ji[:, 1].astype(np.int64)),
                    np.ascontiguousarray(ji[:, 0].astype(np.int64))))
    return out


def _base_trajectories(model, u_full, div_bound):
    """Time-major x, y, ubar of a full warmup simulation."""
    sim = simulate_discrete(model, u_full, div_bound=div_bound)
    if not sim.ok:
        return None, None, None, False
    y = sim.y
    s = model.basis.size
    if s:
        T = y.shape[1]
        g = np.empty((s, T))
        for a, term in enumerate(model.basis.terms):
            v = y[term.channel]
            if hasattr(term, "exponent"):
                g[a] = v ** term.exponent
            else:
                g[a] = np.array([term.func(vi) for vi in v])
        ubar = np.vstack([u_full, g])
    else:
        ubar = u_full
    return (np.ascontiguousarray(sim.x.T), np.ascontiguousarray(y.T),
            np.ascontiguousarray(ubar.T), True)


def _model_output_spectrum(model, setup):
    """DFT of the final simulated period on the processed lines, or None
    when the simulation diverges."""
    u_full = np.tile(setup.u_period, (1, setup.n_warmup + 1))
    sim = simulate_discrete(model, u_full, div_bound=setup.div_bound)
    if not sim.ok:
        return None
    y_last = sim.y[:, -setup.n_period:]
    Y = period_dft(y_last, setup.n_period)[:, 0, :]
    return Y[:, setup.lines]


def residual_spectrum(theta, setup):
    """Complex residual between modeled and measured output spectra.

    Returns
    -------
    (eps, ok) : ndarray(l, F), bool
        ``ok`` is False when the trial simulation diverged; the caller
        treats the step as rejected.
    """
    model = unpack_parameters(theta, setup.mask, setup.template)
    Ym = _model_output_spectrum(model, setup)
    if Ym is None:
        return None, False
    return Ym - setup.y_values, True


def cost(theta, setup):
    """Weighted least-squares cost; +inf for diverging parameters."""
    eps, ok = residual_spectrum(theta, setup)
    if not ok:
        return np.inf
    L = _weight_factor(setup)
    ew = _apply_weight(L, eps.T)  # (F, l)
    return float(np.sum(np.abs(ew) ** 2))


def _propagate_reference(model, x, y, ubar, blocks, keep):
    """Python sensitivity recursion: general basis terms and implicit
    output feedback (direct per-sample linear solve)."""
    (a_r, a_c), (b_r, b_c), (c_r, c_c), (d_r, d_c) = blocks
    nA, nB, nC, nD = len(a_r), len(b_r), len(c_r), len(d_r)
    ntheta = nA + nB + nC + nD
    n = model.A.shape[0]
    l = model.C.shape[0]
    T = x.shape[0]
    E, F = model.E, model.F
    eye = np.eye(l)
    Xs = np.zeros((n, ntheta))
    out = np.zeros((keep, l, ntheta))
    explicit = model.output_feedback_is_explicit()
    for t in range(T):
        if model.basis.size:
            dg, _ = basis_gradient(model.basis, y[t])
            EG = E @ dg
            FG = F @ dg
        else:
            EG = FG = None
        rhs = model.C @ Xs
        if nC:
            rhs[c_r, nA + nB + np.arange(nC)] += x[t, c_c]
        if nD:
            rhs[d_r, nA + nB + nC + np.arange(nD)] += ubar[t, d_c]
        if FG is None:
            Ys = rhs
        elif explicit:
            Ys = rhs + FG @ rhs
        else:
            Ys = np.linalg.solve(eye - FG, rhs)
        if t >= T - keep:
            out[t - (T - keep)] = Ys
        Xn = model.A @ Xs
        if EG is not None:
            Xn = Xn + EG @ Ys
        if nA:
            Xn[a_r, np.arange(nA)] += x[t, a_c]
        if nB:
            Xn[b_r, nA + np.arange(nB)] += ubar[t, b_c]
        Xs = Xn
    return out


def jacobian(theta, setup):
    """Per-line Jacobian of the modeled output spectra w.r.t. the packed
    parameters.

    For every free entry of A and Bext the sensitivity obeys an auxiliary
    state-space recursion sharing the model dynamics, forced by the base
    state/extended-input trajectory; C and Dext entries force the output
    equation directly. All sensitivities couple back through the basis
    gradient whenever the model has nonlinear terms, and are integrated
    over the same warmup protocol as the residual, then DFT'd.

    Returns
    -------
    (J, ok_cols) : ndarray(F, l, n_theta) complex, ndarray(n_theta) bool
        Columns that overflowed are zeroed and flagged False.
    """
    model = unpack_parameters(theta, setup.mask, setup.template)
    u_full = np.tile(setup.u_period, (1, setup.n_warmup + 1))
    x, y, ubar, ok = _base_trajectories(model, u_full, setup.div_bound)
    if not ok:
        raise SimulationError("cannot linearize around a diverging model")
    blocks = _free_indices(setup.mask)
    keep = setup.n_period

    if model.basis.is_monomial and model.output_feedback_is_explicit():
        chan = np.array([t.channel for t in model.basis.terms],
                        dtype=np.int64)
        expo = np.array([t.exponent for t in model.basis.terms],
                        dtype=np.int64)
        (a_r, a_c), (b_r, b_c), (c_r, c_c), (d_r, d_c) = blocks
        sens = _kernels.propagate_sensitivities(
            np.ascontiguousarray(model.A), np.ascontiguousarray(model.E),
            np.ascontiguousarray(model.C), np.ascontiguousarray(model.F),
            x, y, ubar, chan, expo, a_r, a_c, b_r, b_c, c_r, c_c, d_r, d_c,
            keep)
    else:
        sens = _propagate_reference(model, x, y, ubar, blocks, keep)

    J = np.fft.fft(sens, axis=0) / setup.n_period
    J = J[setup.lines]
    ok_cols = np.isfinite(J).all(axis=(0, 1))
    if not ok_cols.all():
        J = J.copy()
        J[:, :, ~ok_cols] = 0.0
    return J, ok_cols


@dataclass
class LmOptions:
    max_iter: int = 100
    lambda0: float = None       # default: 1e-3 * mean diag of the normal matrix
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    tol: float = 1e-10          # relative cost decrease that stops the loop
    lambda_max: float = 1e14


@dataclass
class LmState:
    """Histories and the best-iterate snapshot of one optimization run."""

    theta: np.ndarray = None
    lam: float = np.nan
    iteration: int = 0
    cost_history: list = field(default_factory=list)
    validation_history: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    best_iteration: int = 0
    best_theta: np.ndarray = None
    best_validation: float = np.inf
    status: str = "running"
    n_accepted: int = 0


@dataclass(frozen=True)
class ValidationResult:
    rms: float
    rms_per_channel: np.ndarray
    error_spectrum: SpectrumSet = None
    diverged: bool = False


def validate(model, record, n_warmup=3, div_bound=1e8):
    """Time-domain validation against the last period of a record.

    The model is simulated from rest over ``n_warmup`` prepended copies of
    the record's first input period followed by the record itself; the
    comparison window is the final period.
    """
    u0 = record.per_period(record.u)[:, 0, :]
    u_full = np.hstack([np.tile(u0, (1, n_warmup)), record.u])
    sim = simulate_discrete(model, u_full, div_bound=div_bound)
    if not sim.ok:
        return ValidationResult(np.inf, np.full(record.n_outputs, np.inf),
                                None, True)
    N = record.n_period
    err = sim.y[:, -N:] - record.y[:, -N:]
    rms_ch = np.sqrt(np.mean(err ** 2, axis=1))
    rms = float(np.sqrt(np.mean(err ** 2)))
    lines = np.arange(N // 2)
    spec = period_dft(err, N)[:, 0, lines]
    return ValidationResult(rms, rms_ch,
                            SpectrumSet(lines, spec, N, record.fs), False)


def lm_optimize(theta0, setup, validation=None, options=None):
    """Levenberg-Marquardt refinement with analytical Jacobians.

    Steps are accepted only when the cost decreases, so the accepted-cost
    history is nonincreasing by construction. When a validation record is
    given, every accepted iterate (including the start) is scored by
    time-domain RMS and the best-scoring iterate is returned, mirroring
    the mid-run optimum selection of the reference experiments.

    Returns
    -------
    (theta_best, LmState)
    """
    options = options or LmOptions()
    theta = np.asarray(theta0, dtype=float).copy()
    state = LmState(theta=theta)

    def val_rms(th):
        if validation is None:
            return np.nan
        model = unpack_parameters(th, setup.mask, setup.template)
        return validate(model, validation, n_warmup=setup.n_warmup,
                        div_bound=setup.div_bound).rms

    V = cost(theta, setup)
    if not np.isfinite(V):
        raise SimulationError("initial parameters diverge on the "
                              "estimation input")
    val = val_rms(theta)
    state.cost_history.append(V)
    state.validation_history.append(val)
    state.trace.append({"iteration": 0, "lambda": np.nan, "cost": V,
                        "validation_rms": val, "accepted": True})
    score0 = val if validation is not None else V
    state.best_theta = theta.copy()
    state.best_validation = score0
    L = _weight_factor(setup)

    lam = options.lambda0
    for it in range(1, options.max_iter + 1):
        state.iteration = it
        eps, ok = residual_spectrum(theta, setup)
        if not ok:
            state.status = "diverged"
            break
        J, _ = jacobian(theta, setup)
        Jw = _apply_weight(L, J)
        ew = _apply_weight(L, eps.T)
        Jf = Jw.reshape(-1, Jw.shape[2])
        ef = ew.reshape(-1)
        JtJ = (Jf.conj().T @ Jf).real
        grad = (Jf.conj().T @ ef).real
        if lam is None:
            lam = 1e-3 * float(np.mean(np.diag(JtJ)))
            if lam <= 0:
                lam = 1e-3
        accepted = False
        while lam <= options.lambda_max:
            H = JtJ + lam * np.eye(JtJ.shape[0])
            try:
                delta = np.linalg.solve(H, -grad)
            except np.linalg.LinAlgError:
                delta, *_ = np.linalg.lstsq(H, -grad, rcond=None)
            theta_trial = theta + delta
            V_trial = cost(theta_trial, setup)
            if np.isfinite(V_trial) and V_trial < V:
                theta = theta_trial
                V_prev, V = V, V_trial
                lam = lam / options.lambda_down
                val = val_rms(theta)
                state.cost_history.append(V)
                state.validation_history.append(val)
                state.trace.append({"iteration": it, "lambda": lam,
                                    "cost": V, "validation_rms": val,
                                    "accepted": True})
                state.n_accepted += 1
                score = val if validation is not None else V
                if score < state.best_validation:
                    state.best_validation = score
                    state.best_theta = theta.copy()
                    state.best_iteration = state.n_accepted
                accepted = True
                break
            state.trace.append({"iteration": it, "lambda": lam,
                                "cost": V_trial, "validation_rms": np.nan,
                                "accepted": False})
            lam = lam * options.lambda_up
        if not accepted:
            state.status = "stalled"
            break
        if V_prev - V <= options.tol * max(V_prev, 1e-300):
            state.status = "converged"
            break
    else:
        state.status = "max_iter"
    state.theta = theta
    state.lam = lam if lam is not None else np.nan
    return state.best_theta.copy(), state


def save_trace(path, state):
    """Optimization trace CSV: iteration, lambda, cost, validation RMS,
    accepted flag."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lambda", "cost", "validation_rms",
                    "accepted"])
        for row in state.trace:
            w.writerow([row["iteration"], repr(float(row["lambda"])),
                        repr(float(row["cost"])),
                        repr(float(row["validation_rms"])),
                        int(row["accepted"])])
