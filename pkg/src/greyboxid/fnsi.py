"""Frequency-domain nonlinear subspace identification.

Treats the nonlinear basis signals, evaluated on measured outputs, as
additional inputs of a linear state-space problem and recovers
(A, Bext, C, Dext) non-iteratively from frequency data: block data
matrices in powers of z, orthogonal projection of the outputs onto the
complement of the extended-input row space, SVD for the extended
observability matrix, shift property for A, and an output-spectrum least
squares for Bext/Dext.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .model import Dimensions, GreyBoxModel, ParameterMask
from .signals import ExcitedBand, dft, differentiate_periodic

__all__ = [
    "FnsiDiagnostics",
    "build_extended_input",
    "extended_input_spectra",
    "build_block_matrices",
    "orthogonal_project",
    "estimate_observability",
    "estimate_ac",
    "estimate_bd",
    "fnsi_identify",
    "default_block_rows",
]

_PINV_RTOL = 1e-12


class FnsiError(RuntimeError):
    """Subspace step failure (rank, conditioning, sizes)."""


@dataclass
class FnsiDiagnostics:
    """Everything worth inspecting about a subspace run."""

    block_rows: int = 0
    n_states: int = 0
    singular_values: np.ndarray = None
    projection_rank: int = 0
    projection_rows: int = 0
    shift_condition: float = np.nan
    bd_residual: float = np.nan
    bd_rank: int = 0
    bd_unknowns: int = 0
    spectral_radius: float = np.nan
    warnings: list = field(default_factory=list)

    def to_json(self):
        doc = {
            "block_rows": self.block_rows,
            "n_states": self.n_states,
            "singular_values": [float(s) for s in
                                np.atleast_1d(self.singular_values)],
            "projection_rank": self.projection_rank,
            "projection_rows": self.projection_rows,
            "shift_condition": float(self.shift_condition),
            "bd_residual": float(self.bd_residual),
            "bd_rank": self.bd_rank,
            "bd_unknowns": self.bd_unknowns,
            "spectral_radius": float(self.spectral_radius),
            "warnings": list(self.warnings),
        }
        return json.dumps(doc, indent=1)


def default_block_rows(n_states, n_outputs):
    """Default i; anything comfortably above (n_states + l)/l works on
    clean data."""
    return int(np.ceil(2 * (n_states + 1) / n_outputs)) + 2


def build_extended_input(record, basis):
    """Extended input samples [u; g(y_nl)] over the whole record.

    The basis is evaluated on the measured outputs; velocity terms read
    the derivative synthesized by frequency-domain differentiation of the
    (periodic) output.
    """
    basis.validate_channels(record.n_outputs)
    y = record.y
    ydot = None
    if basis.has_velocity:
        ydot = differentiate_periodic(y, record.n_period, record.fs)
    T = y.shape[1]
    g = np.empty((basis.size, T))
    for a, term in enumerate(basis.terms):
        src = ydot if term.velocity else y
        v = src[term.channel]
        if hasattr(term, "exponent"):
            g[a] = v ** term.exponent
        else:
            g[a] = np.array([term.func(vi) for vi in v])
    return np.vstack([record.u, g])


def extended_input_spectra(record, basis, lines, periods=None):
    """Averaged spectra of the extended input on the given lines."""
    if isinstance(lines, ExcitedBand):
        lines = lines.lines
    ubar = build_extended_input(record, basis)
    ext = record.__class__(u=ubar, y=record.y, fs=record.fs,
                           n_period=record.n_period,
                           n_periods=record.n_periods)
    ubar_spec, y_spec = dft(ext, lines, periods)
    return ubar_spec, y_spec


def build_block_matrices(y_spec, ubar_spec, block_rows):
    """Real-valued block data matrices in powers of z.

    Row block r of the complex form equals the spectrum times z**r; the
    real form concatenates real and imaginary parts column-wise.

    Returns
    -------
    (Y_i, U_i) : ndarray(l*i, 2F), ndarray((m+s)*i, 2F)
    """
    if not np.array_equal(y_spec.lines, ubar_spec.lines):
        raise FnsiError("output and extended-input spectra must share lines")
    if block_rows < 1:
        raise FnsiError("need at least one block row")
    F = y_spec.n_lines
    width = ubar_spec.values.shape[0]
    if F < width * block_rows:
        raise FnsiError(
            f"only {F} lines for {width * block_rows} extended-input rows; "
            "decrease block_rows or widen the band")
    z = y_spec.z

    def stack(values):
        ch = values.shape[0]
        out = np.empty((ch * block_rows, F), dtype=complex)
        zp = np.ones(F, dtype=complex)
        for r in range(block_rows):
            out[r * ch:(r + 1) * ch] = values * zp
            zp = zp * z
        return np.hstack([out.real, out.imag])

    return stack(y_spec.values), stack(ubar_spec.values)


def orthogonal_project(Y_i, U_i, rtol=_PINV_RTOL):
    """Project the rows of Y_i onto the orthogonal complement of the row
    space of U_i:  O = Y_i - Y_i U_i^T (U_i U_i^T)^+ U_i.

    Computed through an SVD row-space basis of U_i (same projector, better
    conditioned than forming the Gram matrix).

    Returns
    -------
    (O_i, info) where info reports the effective row rank of U_i.
    """
    Y_i = np.asarray(Y_i, dtype=float)
    U_i = np.asarray(U_i, dtype=float)
    if Y_i.shape[1] != U_i.shape[1]:
        raise FnsiError("block matrices must share column count")
    _, sv, Vt = np.linalg.svd(U_i, full_matrices=False)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0
    basis = Vt[:rank]
    O = Y_i - (Y_i @ basis.T) @ basis
    info = {"rank": rank, "rows": U_i.shape[0],
            "rank_deficient": rank < U_i.shape[0]}
    return O, info


def estimate_observability(O_i, n_states):
    """Extended observability estimate from the projection SVD:
    the first n_states left singular vectors scaled by the square roots of
    the singular values.

    Returns
    -------
    (Gamma, singular_values)
    """
    L, sv, _ = np.linalg.svd(O_i, full_matrices=False)
    if n_states > sv.size:
        raise FnsiError(f"order {n_states} exceeds projection size")
    tol = _PINV_RTOL * sv[0] if sv.size else 0.0
    if n_states > np.sum(sv > tol):
        raise FnsiError(
            f"order {n_states} exceeds numerical rank "
            f"{int(np.sum(sv > tol))} of the projection")
    Gamma = L[:, :n_states] * np.sqrt(sv[:n_states])
    return Gamma, sv


def estimate_ac(Gamma, n_outputs):
    """A from the shift property of the observability estimate, C from its
    first block row.

    Returns
    -------
    (A, C, condition_number)
    """
    l = n_outputs
    if Gamma.shape[0] < Gamma.shape[1] + l:
        raise FnsiError("not enough block rows for the shift property")
    head = Gamma[:-l]
    tail = Gamma[l:]
    A, *_ = np.linalg.lstsq(head, tail, rcond=None)
    cond = np.linalg.cond(head)
    C = Gamma[:l].copy()
    return A, C, cond


def estimate_bd(A, C, y_spec, ubar_spec, free_bext=None, free_dext=None,
                rtol=_PINV_RTOL):
    """Least-squares Bext, Dext given A, C: minimize the distance between
    the measured output spectra and ``(C (z I - A)^-1 Bext + Dext) Ubar``
    over the free entries (the model is linear in them).

    Returns
    -------
    (Bext, Dext, info) with info = {residual, rank, unknowns, ...}.
    """
    n = A.shape[0]
    l = C.shape[0]
    me = ubar_spec.values.shape[0]
    F = y_spec.n_lines
    if free_bext is None:
        free_bext = np.ones((n, me), dtype=bool)
    if free_dext is None:
        free_dext = np.ones((l, me), dtype=bool)
    z = y_spec.z
    Ubar = ubar_spec.values
    eye = np.eye(n)

    zI_A = z[:, None, None] * eye[None] - A[None]
    try:
        T = np.linalg.solve(zI_A, np.broadcast_to(eye, (F, n, n)))
    except np.linalg.LinAlgError:
        raise FnsiError("z_k I - A singular on a processed line")
    M1 = np.matmul(np.broadcast_to(C, (F, l, n)), T)  # (F, l, n)

    cols = []
    # argwhere over the transpose enumerates (j, i) pairs in the
    # column-major order used by the parameter packing
    bidx = np.argwhere(free_bext.T)
    for j, i in bidx:
        cols.append(M1[:, :, i] * Ubar[j][:, None])
    didx = np.argwhere(free_dext.T)
    for j, i in didx:
        col = np.zeros((F, l), dtype=complex)
        col[:, i] = Ubar[j]
        cols.append(col)
    n_free = len(cols)
    if n_free == 0:
        raise FnsiError("no free entries in Bext/Dext")
    Phi = np.stack(cols, axis=2).reshape(F * l, n_free)
    rhs = y_spec.values.T.reshape(F * l)
    Ar = np.vstack([Phi.real, Phi.imag])
    br = np.concatenate([rhs.real, rhs.imag])
    sol, _, rank, sv = np.linalg.lstsq(Ar, br, rcond=rtol)

    Bext = np.zeros((n, me))
    Dext = np.zeros((l, me))
    nb = len(bidx)
    Bf = Bext.ravel(order="F")
    Bf[free_bext.ravel(order="F")] = sol[:nb]
    Bext = Bf.reshape((n, me), order="F")
    Df = Dext.ravel(order="F")
    Df[free_dext.ravel(order="F")] = sol[nb:]
    Dext = Df.reshape((l, me), order="F")

    Yhat = np.einsum("fln,nm->flm", M1, Bext) + Dext[None]
    Yhat = np.einsum("flm,mf->lf", Yhat, Ubar)
    scale = np.linalg.norm(y_spec.values)
    residual = np.linalg.norm(y_spec.values - Yhat) / max(scale, 1e-300)
    info = {"residual": float(residual), "rank": int(rank),
            "unknowns": n_free,
            "rank_deficient": int(rank) < n_free}
    return Bext, Dext, info


def fnsi_identify(record, basis, band, n_states, block_rows=None,
                  periods=None, mask=None):
    """Initial grey-box model from data, non-iteratively.

    Composes: extended input in the time domain -> averaged spectra on the
    excited lines -> block matrices -> orthogonal projection -> SVD ->
    (A, C) via the shift property -> (Bext, Dext) via output least
    squares.

    Parameters
    ----------
    record : TimeRecord, steady-state periods only.
    basis : BasisSet evaluated on the measured outputs.
    band : ExcitedBand or explicit line array.
    n_states : model order.
    block_rows : data-matrix depth i (default :func:`default_block_rows`).
    mask : ParameterMask; fixed Bext/Dext entries are constrained to zero
        in the least squares (default mask pins F at zero).

    Returns
    -------
    (GreyBoxModel, FnsiDiagnostics)
    """
    l = record.n_outputs
    if block_rows is None:
        block_rows = default_block_rows(n_states, l)
    diag = FnsiDiagnostics(block_rows=block_rows, n_states=n_states)

    ubar_spec, y_spec = extended_input_spectra(record, basis, band, periods)
    Y_i, U_i = build_block_matrices(y_spec, ubar_spec, block_rows)
    O, pinfo = orthogonal_project(Y_i, U_i)
    diag.projection_rank = pinfo["rank"]
    diag.projection_rows = pinfo["rows"]
    if pinfo["rank_deficient"]:
        diag.warnings.append(
            f"extended-input block matrix rank {pinfo['rank']} < "
            f"{pinfo['rows']} rows")
    Gamma, sv = estimate_observability(O, n_states)
    diag.singular_values = sv
    A, C, cond = estimate_ac(Gamma, l)
    diag.shift_condition = cond

    if mask is None:
        mask = ParameterMask.default(Dimensions(
            n_states, record.n_inputs, l, basis.size))
    Bext, Dext, binfo = estimate_bd(A, C, y_spec, ubar_spec,
                                    free_bext=mask.Bext, free_dext=mask.Dext)
    diag.bd_residual = binfo["residual"]
    diag.bd_rank = binfo["rank"]
    diag.bd_unknowns = binfo["unknowns"]
    if binfo["rank_deficient"]:
        diag.warnings.append(
            f"Bext/Dext least squares rank deficient "
            f"({binfo['rank']}/{binfo['unknowns']}); some regressors are "
            "unexcited")

    model = GreyBoxModel(A=A, Bext=Bext, C=C, Dext=Dext, ts=1.0 / record.fs,
                         basis=basis)
    diag.spectral_radius = float(np.max(np.abs(np.linalg.eigvals(A))))
    if diag.spectral_radius >= 1.0:
        diag.warnings.append(
            f"subspace A is unstable (spectral radius "
            f"{diag.spectral_radius:.6f}); refinement may still recover it")
    return model, diag
