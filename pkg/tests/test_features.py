"""Feature family tests.

Polynomial values are checked against numpy's reference evaluators and the
Gram matrices against Gauss-Legendre quadrature, so recurrence and
closed-form moment code are validated independently of each other.
"""

import math

import numpy as np
import pytest
from numpy.polynomial import hermite_e, legendre

from ftn.features import (
    FeatureBatch,
    FeatureFamily,
    basis_transform,
    coefficient_matrix,
    eval_features,
    gram_matrix,
)

X = np.array([-1.0, -0.7, -0.2, 0.0, 0.31, 0.5, 1.0, 1.8])


def _batch(family, x=X):
    return eval_features(family, x[:, None]).modes[0]


def test_monomial_values():
    out = _batch(FeatureFamily("monomial", degree=3))
    np.testing.assert_allclose(out, np.stack([X**0, X, X**2, X**3], axis=1))
    np.testing.assert_array_equal(
        _batch(FeatureFamily("monomial", degree=0)), np.ones((len(X), 1))
    )


def test_legendre_against_numpy():
    out = _batch(FeatureFamily("legendre", degree=4))
    for k in range(5):
        coeffs = np.zeros(5)
        coeffs[k] = np.sqrt(2 * k + 1)
        np.testing.assert_allclose(out[:, k], legendre.legval(X, coeffs), atol=1e-13)


def test_legendre_frozen_values():
    out = _batch(FeatureFamily("legendre", degree=2), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out[0], [1.0, np.sqrt(3.0), np.sqrt(5.0)], atol=1e-14)
    np.testing.assert_allclose(out[1], [1.0, 0.0, -np.sqrt(5.0) / 2.0], atol=1e-14)


def test_hermite_against_numpy():
    out = _batch(FeatureFamily("hermite", degree=4))
    for k in range(5):
        coeffs = np.zeros(5)
        coeffs[k] = 1.0
        np.testing.assert_allclose(out[:, k], hermite_e.hermeval(X, coeffs), atol=1e-12)
    # He_2(2) = 3, He_3(2) = 2.
    vals = _batch(FeatureFamily("hermite", degree=3), np.array([2.0]))
    np.testing.assert_allclose(vals[0], [1.0, 2.0, 3.0, 2.0], atol=1e-14)


def test_hermite_normalized_scaling():
    raw = _batch(FeatureFamily("hermite", degree=4))
    scaled = _batch(FeatureFamily("hermite", degree=4, hermite_normalized=True))
    factors = np.sqrt([math.factorial(k) for k in range(5)])
    np.testing.assert_allclose(scaled * factors, raw, atol=1e-13)


def test_normalized_affine_unit_rows():
    fam = FeatureFamily("normalized-affine")
    assert fam.dim == 2
    out = _batch(fam)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-14)
    np.testing.assert_allclose(out, np.stack([1.0 / np.sqrt(1 + X**2), X / np.sqrt(1 + X**2)], axis=1))


def test_coefficient_matrix_reproduces_features():
    vander = np.stack([X**k for k in range(4)], axis=1)
    for kind in ("monomial", "legendre", "hermite"):
        fam = FeatureFamily(kind, degree=3)
        np.testing.assert_allclose(
            _batch(fam), vander @ coefficient_matrix(fam).T, atol=1e-12
        )


def test_gram_matches_quadrature():
    # 64-point Gauss-Legendre, rescaled to the uniform probability measure.
    nodes, weights = legendre.leggauss(64)
    weights = weights / 2.0
    for kind in ("monomial", "legendre", "hermite"):
        fam = FeatureFamily(kind, degree=4)
        phi = _batch(fam, nodes)
        numerical = phi.T @ (weights[:, None] * phi)
        np.testing.assert_allclose(gram_matrix(fam), numerical, atol=1e-12)


def test_legendre_gram_is_identity():
    np.testing.assert_allclose(
        gram_matrix(FeatureFamily("legendre", degree=5)), np.eye(6), atol=1e-12
    )


def test_basis_transform_pointwise():
    mono = FeatureFamily("monomial", degree=3)
    for kind in ("legendre", "hermite"):
        fam = FeatureFamily(kind, degree=3)
        m = basis_transform(mono, fam)
        np.testing.assert_allclose(_batch(mono), _batch(fam) @ m.T, atol=1e-12)
        back = basis_transform(fam, mono)
        np.testing.assert_allclose(m @ back, np.eye(4), atol=1e-12)


def test_family_validation():
    with pytest.raises(ValueError, match="unknown feature family"):
        FeatureFamily("chebyshev")
    with pytest.raises(ValueError, match="degree must be 1"):
        FeatureFamily("normalized-affine", degree=2)
    with pytest.raises(ValueError, match="nonnegative"):
        FeatureFamily("monomial", degree=-1)
    with pytest.raises(ValueError):
        coefficient_matrix(FeatureFamily("normalized-affine"))
    with pytest.raises(ValueError):
        gram_matrix(FeatureFamily("normalized-affine"))
    with pytest.raises(ValueError, match="unsupported measure"):
        gram_matrix(FeatureFamily("legendre", degree=2), measure="gaussian")
    with pytest.raises(ValueError, match="equal dimension"):
        basis_transform(FeatureFamily("monomial", degree=2), FeatureFamily("monomial", degree=3))


def test_eval_features_shapes_and_batch():
    fam = FeatureFamily("legendre", degree=2)
    batch = eval_features(fam, np.zeros((5, 3)))
    assert batch.num_samples == 5 and batch.num_modes == 3
    sub = batch.take(np.array([0, 4]))
    assert sub.num_samples == 2
    with pytest.raises(ValueError):
        eval_features(fam, np.zeros(5))
    with pytest.raises(ValueError):
        FeatureBatch((np.zeros((3, 2)), np.zeros((4, 2))))
    with pytest.raises(ValueError):
        FeatureBatch(())
