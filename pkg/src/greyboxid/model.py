"""Grey-box state-space model, nonlinear basis evaluation and parameter packing.

The model class is a discrete-time state space whose extended input
concatenates the external forces with a small set of nonlinear basis
signals evaluated on designated output channels:

    x(t+1) = A x(t) + Bext [u(t); g(t)]
    y(t)   = C x(t) + Dext [u(t); g(t)]

with ``Bext = [B E]`` and ``Dext = [D F]``. The basis signals g(t) are
univariate monomials (or user-supplied scalar functions) of the output
displacements, optionally of their time derivatives.
"""

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dimensions",
    "BasisTerm",
    "FunctionTerm",
    "BasisSet",
    "GreyBoxModel",
    "ParameterMask",
    "eval_basis",
    "basis_gradient",
    "pack_parameters",
    "unpack_parameters",
    "free_parameter_count",
    "model_to_json",
    "model_from_json",
    "save_model",
    "load_model",
]


class ModelError(ValueError):
    """Inconsistent model, basis or mask definition."""


def _frozen(a, dtype=float):
    """Return a read-only float array copy (value-object semantics)."""
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dimensions:
    """Problem sizes shared by all modules.

    n_states : model order (state dimension)
    n_inputs : number of external inputs
    n_outputs: number of measured outputs
    n_terms  : number of nonlinear basis terms
    """

    n_states: int
    n_inputs: int
    n_outputs: int
    n_terms: int

    def __post_init__(self):
        if self.n_states < 1 or self.n_inputs < 1 or self.n_outputs < 1:
            raise ModelError(f"invalid dimensions {self}")
        if self.n_terms < 0:
            raise ModelError("n_terms must be >= 0")

    @property
    def n_ext(self):
        """Width of the extended input [u; g]."""
        return self.n_inputs + self.n_terms


@dataclass(frozen=True)
class BasisTerm:
    """One univariate monomial ``y[channel]**exponent`` (or its velocity
    analogue when ``velocity`` is set).

    Degree-1 content belongs to the linear part of the model, hence
    exponent >= 2.
    """

    channel: int
    exponent: int
    velocity: bool = False

    def __post_init__(self):
        if self.channel < 0:
            raise ModelError("channel must be a 0-based output index")
        if self.exponent < 2:
            raise ModelError("monomial exponent must be >= 2")


@dataclass(frozen=True)
class FunctionTerm:
    """Extension point: arbitrary scalar basis function of one channel.

    ``func`` maps a sample value to the basis value, ``dfunc`` is its
    derivative. Not JSON-serializable.
    """

    channel: int
    func: object
    dfunc: object
    velocity: bool = False
    label: str = "custom"


@dataclass(frozen=True)
class BasisSet:
    """Ordered basis terms; the order fixes the columns of E and F and the
    entries of g(t)."""

    terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for term in self.terms:
            if not isinstance(term, (BasisTerm, FunctionTerm)):
                raise ModelError(f"unsupported basis term {term!r}")

    @property
    def size(self):
        return len(self.terms)

    @property
    def nl_channels(self):
        """Distinct output channels read by the basis, sorted."""
        return tuple(sorted({t.channel for t in self.terms}))

    @property
    def has_velocity(self):
        return any(t.velocity for t in self.terms)

    @property
    def is_monomial(self):
        return all(isinstance(t, BasisTerm) for t in self.terms)

    def validate_channels(self, n_outputs):
        for term in self.terms:
            if term.channel >= n_outputs:
                raise ModelError(
                    f"basis channel {term.channel} out of range for "
                    f"{n_outputs} outputs")

    @classmethod
    def polynomial(cls, channel, degrees, velocity=False):
        """Monomial terms of the given degrees on one output channel."""
        return cls(tuple(BasisTerm(channel, d, velocity) for d in degrees))


def eval_basis(basis, y, ydot=None):
    """Evaluate the basis signals g for one output sample.

    Parameters
    ----------
    basis : BasisSet
    y : ndarray(l)
        Output sample.
    ydot : ndarray(l), optional
        Output derivative sample; required iff any term has the velocity
        flag set.

    Returns
    -------
    g : ndarray(s)
    """
    y = np.asarray(y, dtype=float)
    if basis.has_velocity and ydot is None:
        raise ModelError("basis has velocity terms but ydot was not given")
    basis.validate_channels(y.shape[0])
    g = np.empty(basis.size)
    for a, term in enumerate(basis.terms):
        v = ydot[term.channel] if term.velocity else y[term.channel]
        if isinstance(term, BasisTerm):
            g[a] = v ** term.exponent
        else:
            g[a] = term.func(v)
    return g


def basis_gradient(basis, y, ydot=None):
    """Derivatives of the basis signals with respect to the output sample.

    Returns
    -------
    dg_dy : ndarray(s, l)
    dg_dydot : ndarray(s, l)
        Zero rows for displacement terms; only returned entries for
        velocity terms are nonzero.
    """
    y = np.asarray(y, dtype=float)
    if basis.has_velocity and ydot is None:
        raise ModelError("basis has velocity terms but ydot was not given")
    basis.validate_channels(y.shape[0])
    l = y.shape[0]
    dg_dy = np.zeros((basis.size, l))
    dg_dydot = np.zeros((basis.size, l))
    for a, term in enumerate(basis.terms):
        v = ydot[term.channel] if term.velocity else y[term.channel]
        if isinstance(term, BasisTerm):
            d = term.exponent * v ** (term.exponent - 1)
        else:
            d = term.dfunc(v)
        (dg_dydot if term.velocity else dg_dy)[a, term.channel] = d
    return dg_dy, dg_dydot


@dataclass(frozen=True)
class GreyBoxModel:
    """Discrete-time grey-box state-space model.

    A : ndarray(n_states, n_states)
    Bext : ndarray(n_states, n_inputs + n_terms)
        Concatenation [B E] of the linear input matrix and the nonlinear
        state coefficients.
    C : ndarray(n_outputs, n_states)
    Dext : ndarray(n_outputs, n_inputs + n_terms)
        Concatenation [D F].
    ts : sample period in seconds.
    basis : BasisSet
    """

    A: np.ndarray
    Bext: np.ndarray
    C: np.ndarray
    Dext: np.ndarray
    ts: float
    basis: BasisSet = field(default_factory=BasisSet)

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A))
        object.__setattr__(self, "Bext", _frozen(self.Bext))
        object.__setattr__(self, "C", _frozen(self.C))
        object.__setattr__(self, "Dext", _frozen(self.Dext))
        n = self.A.shape[0]
        s = self.basis.size
        if self.A.shape != (n, n):
            raise ModelError(f"A must be square, got {self.A.shape}")
        if self.Bext.ndim != 2 or self.Bext.shape[0] != n:
            raise ModelError(f"Bext shape {self.Bext.shape} inconsistent")
        if self.Bext.shape[1] <= s:
            raise ModelError("Bext must have n_inputs + n_terms columns")
        l = self.C.shape[0]
        if self.C.shape != (l, n):
            raise ModelError(f"C shape {self.C.shape} inconsistent")
        if self.Dext.shape != (l, self.Bext.shape[1]):
            raise ModelError(f"Dext shape {self.Dext.shape} inconsistent")
        if not (np.isfinite(self.A).all() and np.isfinite(self.Bext).all()
                and np.isfinite(self.C).all() and np.isfinite(self.Dext).all()):
            raise ModelError("model matrices must be finite")
        if not self.ts > 0:
            raise ModelError("ts must be positive")
        self.basis.validate_channels(l)

    @property
    def dims(self):
        return Dimensions(
            n_states=self.A.shape[0],
            n_inputs=self.Bext.shape[1] - self.basis.size,
            n_outputs=self.C.shape[0],
            n_terms=self.basis.size,
        )

    @property
    def fs(self):
        return 1.0 / self.ts

    # column partitions of the extended matrices
    @property
    def B(self):
        return self.Bext[:, : self.dims.n_inputs]

    @property
    def E(self):
        return self.Bext[:, self.dims.n_inputs:]

    @property
    def D(self):
        return self.Dext[:, : self.dims.n_inputs]

    @property
    def F(self):
        return self.Dext[:, self.dims.n_inputs:]

    def replace_matrices(self, A=None, Bext=None, C=None, Dext=None):
        return GreyBoxModel(
            A=self.A if A is None else A,
            Bext=self.Bext if Bext is None else Bext,
            C=self.C if C is None else C,
            Dext=self.Dext if Dext is None else Dext,
            ts=self.ts,
            basis=self.basis,
        )

    def transfer_matrix(self, z):
        """Extended transfer matrix ``C (z I - A)^-1 Bext + Dext`` at the
        given points of the z plane.

        Returns ndarray(F, n_outputs, n_ext).
        """
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        n = self.A.shape[0]
        eye = np.eye(n)
        G = np.empty((z.size, self.C.shape[0], self.Bext.shape[1]),
                     dtype=complex)
        for k, zk in enumerate(z):
            G[k] = self.C @ np.linalg.solve(zk * eye - self.A, self.Bext) \
                + self.Dext
        return G

    def output_feedback_is_explicit(self):
        """True when the F rows feeding the basis channels are zero, so the
        output equation can be evaluated without an implicit solve."""
        if self.basis.size == 0:
            return True
        F = self.F
        return not np.any(F[list(self.basis.nl_channels), :])


@dataclass(frozen=True)
class ParameterMask:
    """Boolean free/fixed patterns over (A, Bext, C, Dext).

    True marks a free entry included in the packed parameter vector;
    False entries keep their template value.
    """

    A: np.ndarray
    Bext: np.ndarray
    C: np.ndarray
    Dext: np.ndarray

    def __post_init__(self):
        for name in ("A", "Bext", "C", "Dext"):
            object.__setattr__(self, name,
                               _frozen(getattr(self, name), dtype=bool))

    @classmethod
    def all_free(cls, dims):
        n, me, l = dims.n_states, dims.n_ext, dims.n_outputs
        return cls(np.ones((n, n)), np.ones((n, me)),
                   np.ones((l, n)), np.ones((l, me)))

    @classmethod
    def default(cls, dims):
        """Everything free except F (output-equation nonlinear couplings),
        which both case studies of interest keep at zero."""
        n, m, s, l = dims.n_states, dims.n_inputs, dims.n_terms, dims.n_outputs
        dext = np.ones((l, m + s), dtype=bool)
        dext[:, m:] = False
        return cls(np.ones((n, n)), np.ones((n, m + s)),
                   np.ones((l, n)), dext)

    @property
    def n_free(self):
        return int(self.A.sum() + self.Bext.sum()
                   + self.C.sum() + self.Dext.sum())

    def matches(self, model):
        return (self.A.shape == model.A.shape
                and self.Bext.shape == model.Bext.shape
                and self.C.shape == model.C.shape
                and self.Dext.shape == model.Dext.shape)


def free_parameter_count(dims, mask=None):
    """Number of packed parameters for the given sizes (default mask)."""
    if mask is None:
        mask = ParameterMask.default(dims)
    return mask.n_free


def _mask_pairs(model, mask):
    if not mask.matches(model):
        raise ModelError("mask dimensions do not match model")
    return ((model.A, mask.A), (model.Bext, mask.Bext),
            (model.C, mask.C), (model.Dext, mask.Dext))


def pack_parameters(model, mask=None):
    """Stack the free entries of (A, Bext, C, Dext) into a vector.

    Entries are taken column-major inside each matrix, matrices in the
    order A, Bext, C, Dext.
    """
    if mask is None:
        mask = ParameterMask.default(model.dims)
    parts = [m.ravel(order="F")[mk.ravel(order="F")]
             for m, mk in _mask_pairs(model, mask)]
    return np.concatenate(parts)


def unpack_parameters(theta, mask, template):
    """Inverse of :func:`pack_parameters`; fixed entries come from the
    template model."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (mask.n_free,):
        raise ModelError(
            f"theta has length {theta.size}, mask frees {mask.n_free}")
    mats = []
    pos = 0
    for m, mk in _mask_pairs(template, mask):
        flat = m.ravel(order="F").copy()
        sel = mk.ravel(order="F")
        k = int(sel.sum())
        flat[sel] = theta[pos:pos + k]
        pos += k
        mats.append(flat.reshape(m.shape, order="F"))
    return template.replace_matrices(*mats)


# ---------------------------------------------------------------------------
# JSON serialization. Matrices are stored as row-major nested lists; the
# default float repr round-trips doubles exactly.

def _basis_to_obj(basis):
    out = []
    for term in basis.terms:
        if not isinstance(term, BasisTerm):
            raise ModelError(
                f"cannot serialize custom basis term {term.label!r}")
        out.append({"channel": term.channel, "exponent": term.exponent,
                    "velocity": term.velocity})
    return out


def _basis_from_obj(obj):
    return BasisSet(tuple(
        BasisTerm(int(t["channel"]), int(t["exponent"]),
                  bool(t.get("velocity", False))) for t in obj))


def model_to_json(model, mask=None):
    dims = model.dims
    doc = {
        "dims": {"n_states": dims.n_states, "n_inputs": dims.n_inputs,
                 "n_outputs": dims.n_outputs, "n_terms": dims.n_terms},
        "ts": model.ts,
        "basis": _basis_to_obj(model.basis),
        "A": model.A.tolist(),
        "Bext": model.Bext.tolist(),
        "C": model.C.tolist(),
        "Dext": model.Dext.tolist(),
    }
    if mask is not None:
        doc["mask"] = {name: getattr(mask, name).astype(int).tolist()
                       for name in ("A", "Bext", "C", "Dext")}
    return json.dumps(doc, indent=1)


def model_from_json(text):
    doc = json.loads(text)
    model = GreyBoxModel(
        A=np.array(doc["A"], dtype=float),
        Bext=np.array(doc["Bext"], dtype=float),
        C=np.array(doc["C"], dtype=float),
        Dext=np.array(doc["Dext"], dtype=float),
        ts=float(doc["ts"]),
        basis=_basis_from_obj(doc.get("basis", ())),
    )
    mask = None
    if "mask" in doc:
        mk = doc["mask"]
        mask = ParameterMask(np.array(mk["A"], dtype=bool),
                             np.array(mk["Bext"], dtype=bool),
                             np.array(mk["C"], dtype=bool),
                             np.array(mk["Dext"], dtype=bool))
    return model, mask


def save_model(path, model, mask=None):
    with open(path, "w") as fh:
        fh.write(model_to_json(model, mask))


def load_model(path):
    with open(path) as fh:
        return model_from_json(fh.read())
