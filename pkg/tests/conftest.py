import numpy as np
import pytest

from greyboxid.model import BasisSet, GreyBoxModel, ParameterMask


def random_stable_model(rng, n_states=2, n_inputs=1, n_outputs=1,
                        degrees=(2, 3), channel=0, ts=1e-3,
                        spectral_radius=0.85, feedback_scale=0.05,
                        f_scale=0.0):
    """Random grey-box model with a comfortably stable linear part and a
    weak nonlinear feedback, so simulations driven at O(0.1) inputs stay
    bounded."""
    A = rng.standard_normal((n_states, n_states))
    A *= spectral_radius / max(np.abs(np.linalg.eigvals(A)))
    s = len(degrees)
    B = rng.standard_normal((n_states, n_inputs))
    E = feedback_scale * rng.standard_normal((n_states, s))
    C = rng.standard_normal((n_outputs, n_states))
    D = 0.1 * rng.standard_normal((n_outputs, n_inputs))
    F = f_scale * rng.standard_normal((n_outputs, s))
    basis = BasisSet.polynomial(channel, degrees)
    return GreyBoxModel(A=A, Bext=np.hstack([B, E]), C=C,
                        Dext=np.hstack([D, F]), ts=ts, basis=basis)


def similarity_transform(model, T):
    """Equivalent model in a different state basis."""
    Ti = np.linalg.inv(T)
    return GreyBoxModel(A=Ti @ model.A @ T, Bext=Ti @ model.Bext,
                        C=model.C @ T, Dext=model.Dext, ts=model.ts,
                        basis=model.basis)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
