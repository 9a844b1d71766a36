import json

import numpy as np
import pytest

from greyboxid.model import (BasisSet, BasisTerm, Dimensions, FunctionTerm,
                             GreyBoxModel, ModelError, ParameterMask,
                             basis_gradient, eval_basis,
                             free_parameter_count, model_from_json,
                             model_to_json, pack_parameters,
                             unpack_parameters)
from conftest import random_stable_model


def test_eval_basis_powers():
    basis = BasisSet.polynomial(0, (2, 3))
    np.testing.assert_allclose(eval_basis(basis, [2.0]), [4.0, 8.0])
    np.testing.assert_allclose(eval_basis(BasisSet.polynomial(0, (3,)),
                                          [0.0]), [0.0])


def test_eval_basis_silverbox_shape():
    # quadratic + cubic displacement terms on one channel: s = 2
    basis = BasisSet.polynomial(0, (2, 3))
    assert basis.size == 2
    assert basis.nl_channels == (0,)
    assert not basis.has_velocity


def test_eval_basis_errors():
    vel = BasisSet((BasisTerm(0, 2, velocity=True),))
    with pytest.raises(ModelError):
        eval_basis(vel, [1.0])
    with pytest.raises(ModelError):
        eval_basis(BasisSet.polynomial(3, (2,)), [1.0, 2.0])
    with pytest.raises(ModelError):
        BasisTerm(0, 1)  # degree-1 content belongs to the linear part


def test_basis_gradient_values():
    basis = BasisSet.polynomial(0, (3,))
    dg, _ = basis_gradient(basis, [2.0])
    np.testing.assert_allclose(dg, [[12.0]])
    dg, _ = basis_gradient(BasisSet.polynomial(0, (2,)), [0.0])
    np.testing.assert_allclose(dg, [[0.0]])


def test_basis_gradient_matches_finite_differences(rng):
    basis = BasisSet((BasisTerm(0, 2), BasisTerm(1, 3), BasisTerm(0, 5),
                      BasisTerm(1, 2, velocity=True)))
    for _ in range(20):
        y = rng.uniform(-1, 1, size=2)
        ydot = rng.uniform(-1, 1, size=2)
        dg_dy, dg_dydot = basis_gradient(basis, y, ydot)
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (eval_basis(basis, y + e, ydot)
                  - eval_basis(basis, y - e, ydot)) / (2 * h)
            np.testing.assert_allclose(dg_dy[:, j], fd, rtol=1e-8,
                                       atol=1e-8)
            fd = (eval_basis(basis, y, ydot + e)
                  - eval_basis(basis, y, ydot - e)) / (2 * h)
            np.testing.assert_allclose(dg_dydot[:, j], fd, rtol=1e-8,
                                       atol=1e-8)


def test_function_term_extension():
    term = FunctionTerm(0, func=np.tanh, dfunc=lambda v: 1 - np.tanh(v) ** 2)
    basis = BasisSet((term,))
    g = eval_basis(basis, [0.3])
    np.testing.assert_allclose(g, [np.tanh(0.3)])
    dg, _ = basis_gradient(basis, [0.3])
    np.testing.assert_allclose(dg, [[1 - np.tanh(0.3) ** 2]])


def test_parameter_count_silverbox_and_beam():
    # order 2, 1 input, 1 output, quadratic+cubic terms, F pinned -> 13
    dims = Dimensions(2, 1, 1, 2)
    assert free_parameter_count(dims) == 13
    # order 2, 1 input, 7 outputs, degrees 2..5, F pinned -> 35
    dims = Dimensions(2, 1, 7, 4)
    assert free_parameter_count(dims) == 35
    # everything free
    dims = Dimensions(2, 1, 1, 2)
    assert ParameterMask.all_free(dims).n_free == 4 + 6 + 2 + 3


@pytest.mark.parametrize("n,m,l,s", [(1, 1, 1, 0), (2, 1, 1, 2),
                                     (3, 2, 2, 1), (4, 1, 7, 4)])
def test_parameter_count_formula(n, m, l, s):
    dims = Dimensions(n, m, l, s)
    assert free_parameter_count(dims) == n * n + n * (m + s) + l * n + l * m


def test_pack_unpack_round_trip(rng):
    model = random_stable_model(rng, n_states=3, n_inputs=2, n_outputs=2,
                                f_scale=0.1)
    for mask in (ParameterMask.default(model.dims),
                 ParameterMask.all_free(model.dims)):
        theta = pack_parameters(model, mask)
        assert theta.shape == (mask.n_free,)
        back = unpack_parameters(theta, mask, model)
        np.testing.assert_array_equal(back.A, model.A)
        np.testing.assert_array_equal(back.Bext, model.Bext)
        np.testing.assert_array_equal(back.C, model.C)
        np.testing.assert_array_equal(back.Dext, model.Dext)


def test_unpack_zero_gives_zero_model(rng):
    model = random_stable_model(rng)
    mask = ParameterMask.all_free(model.dims)
    zero = unpack_parameters(np.zeros(mask.n_free), mask, model)
    assert not zero.A.any() and not zero.Bext.any()
    assert not zero.C.any() and not zero.Dext.any()


def test_single_entry_perturbation(rng):
    """Each packed slot maps to exactly one matrix entry."""
    model = random_stable_model(rng, n_states=2, n_inputs=1, n_outputs=2)
    mask = ParameterMask.default(model.dims)
    theta = pack_parameters(model, mask)
    delta = 0.37
    for k in range(theta.size):
        bumped = theta.copy()
        bumped[k] += delta
        pert = unpack_parameters(bumped, mask, model)
        diffs = [pert.A - model.A, pert.Bext - model.Bext,
                 pert.C - model.C, pert.Dext - model.Dext]
        flat = np.concatenate([d.ravel() for d in diffs])
        nz = np.flatnonzero(flat)
        assert nz.size == 1
        np.testing.assert_allclose(flat[nz], delta)


def test_packing_order_is_column_major(rng):
    model = random_stable_model(rng, n_states=2, n_inputs=1, n_outputs=1)
    theta = pack_parameters(model, ParameterMask.all_free(model.dims))
    expected = np.concatenate([model.A.ravel(order="F"),
                               model.Bext.ravel(order="F"),
                               model.C.ravel(order="F"),
                               model.Dext.ravel(order="F")])
    np.testing.assert_array_equal(theta, expected)


def test_theta_length_mismatch_raises(rng):
    model = random_stable_model(rng)
    mask = ParameterMask.default(model.dims)
    with pytest.raises(ModelError):
        unpack_parameters(np.zeros(mask.n_free + 1), mask, model)


def test_model_json_round_trip(rng):
    model = random_stable_model(rng, n_states=3, n_outputs=2)
    mask = ParameterMask.default(model.dims)
    text = model_to_json(model, mask)
    back, mask_back = model_from_json(text)
    np.testing.assert_array_equal(back.A, model.A)
    np.testing.assert_array_equal(back.Bext, model.Bext)
    np.testing.assert_array_equal(back.C, model.C)
    np.testing.assert_array_equal(back.Dext, model.Dext)
    assert back.ts == model.ts
    assert back.basis == model.basis
    np.testing.assert_array_equal(mask_back.Dext, mask.Dext)
    # matrices are row-major nested arrays in the document
    doc = json.loads(text)
    assert doc["A"][0][1] == model.A[0, 1]


def test_custom_term_not_serializable():
    basis = BasisSet((FunctionTerm(0, np.tanh, lambda v: 1.0),))
    model = GreyBoxModel(A=np.eye(1) * 0.5, Bext=np.ones((1, 2)),
                         C=np.ones((1, 1)), Dext=np.zeros((1, 2)), ts=1.0,
                         basis=basis)
    with pytest.raises(ModelError):
        model_to_json(model)


def test_dimension_invariants():
    with pytest.raises(ModelError):
        Dimensions(0, 1, 1, 0)
    with pytest.raises(ModelError):
        Dimensions(1, 1, 1, -1)
    assert Dimensions(2, 1, 1, 2).n_ext == 3


def test_model_shape_validation():
    with pytest.raises(ModelError):
        GreyBoxModel(A=np.zeros((2, 2)), Bext=np.zeros((3, 1)),
                     C=np.zeros((1, 2)), Dext=np.zeros((1, 1)), ts=1.0)
    with pytest.raises(ModelError):
        GreyBoxModel(A=np.full((1, 1), np.nan), Bext=np.zeros((1, 1)),
                     C=np.zeros((1, 1)), Dext=np.zeros((1, 1)), ts=1.0)


def test_model_partitions(rng):
    model = random_stable_model(rng, n_states=2, n_inputs=2, n_outputs=1,
                                degrees=(2, 3, 4))
    assert model.B.shape == (2, 2)
    assert model.E.shape == (2, 3)
    np.testing.assert_array_equal(model.Bext[:, 2:], model.E)
    assert model.output_feedback_is_explicit()
