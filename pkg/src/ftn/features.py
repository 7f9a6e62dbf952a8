"""Univariate feature maps applied mode by mode.

A feature family maps a scalar input to a feature vector; evaluating a family
on an (m, d) sample matrix yields one (m, n_nu) matrix per mode, collected in
a :class:`FeatureBatch`.  Polynomial families are evaluated with their
three-term recurrences.

Families
--------
``monomial``
    (1, x, x^2, ..., x^degree).
``legendre``
    Legendre polynomials scaled by sqrt(2k+1) so they are orthonormal in
    L2 of the uniform probability measure on [-1, 1].
``hermite``
    Probabilists' Hermite polynomials He_k (raw by default; set
    ``hermite_normalized`` to divide by sqrt(k!)).
``normalized-affine``
    (1, x) / sqrt(1 + x^2); always two-dimensional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FeatureFamily",
    "FeatureBatch",
    "eval_features",
    "gram_matrix",
    "coefficient_matrix",
    "basis_transform",
]

_POLYNOMIAL_KINDS = ("monomial", "legendre", "hermite")
_KINDS = _POLYNOMIAL_KINDS + ("normalized-affine",)


@dataclass(frozen=True)
class FeatureFamily:
    """A named univariate feature map with its parameters."""

    kind: str
    degree: int = 1
    hermite_normalized: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown feature family {self.kind!r}")
        if self.kind == "normalized-affine":
            if self.degree != 1:
                raise ValueError("normalized-affine is affine; degree must be 1")
        elif self.degree < 0:
            raise ValueError("degree must be nonnegative")

    @property
    def dim(self) -> int:
        """Length of the feature vector (n_nu)."""
        return 2 if self.kind == "normalized-affine" else self.degree + 1


@dataclass(frozen=True)
class FeatureBatch:
    """Per-mode feature matrices for a batch of samples.

    ``modes[nu]`` has shape (m, n_nu) with one row per sample; all modes share
    the same row count.
    """

    modes: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.modes:
            raise ValueError("a feature batch needs at least one mode")
        m = self.modes[0].shape[0]
        for nu, mat in enumerate(self.modes):
            if mat.ndim != 2:
                raise ValueError(f"mode {nu} is not a matrix")
            if mat.shape[0] != m:
                raise ValueError(
                    f"mode {nu} has {mat.shape[0]} rows, expected {m}"
                )

    @property
    def num_samples(self) -> int:
        return self.modes[0].shape[0]

    @property
    def num_modes(self) -> int:
        return len(self.modes)

    def take(self, indices) -> "FeatureBatch":
        """Sub-batch at the given sample indices."""
        return FeatureBatch(tuple(mat[indices] for mat in self.modes))


def _eval_column(family: FeatureFamily, x: np.ndarray) -> np.ndarray:
    """Feature matrix (len(x), family.dim) for one mode's scalar inputs."""
    if family.kind == "normalized-affine":
        scale = 1.0 / np.sqrt(1.0 + x * x)
        return np.stack([scale, x * scale], axis=1)

    n = family.dim
    out = np.empty((x.shape[0], n))
    out[:, 0] = 1.0
    if family.kind == "monomial":
        for k in range(1, n):
            out[:, k] = out[:, k - 1] * x
    elif family.kind == "legendre":
        if n > 1:
            out[:, 1] = x
        for k in range(1, n - 1):
            out[:, k + 1] = ((2 * k + 1) * x * out[:, k] - k * out[:, k - 1]) / (k + 1)
        out *= np.sqrt(2.0 * np.arange(n) + 1.0)
    else:  # hermite
        if n > 1:
            out[:, 1] = x
        for k in range(1, n - 1):
            out[:, k + 1] = x * out[:, k] - k * out[:, k - 1]
        if family.hermite_normalized:
            out /= np.sqrt([math.factorial(k) for k in range(n)])
    return out


def eval_features(family: FeatureFamily, samples: np.ndarray) -> FeatureBatch:
    """Evaluate one family on every mode of an (m, d) sample matrix."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be an (m, d) matrix")
    return FeatureBatch(
        tuple(_eval_column(family, samples[:, nu]) for nu in range(samples.shape[1]))
    )


def coefficient_matrix(family: FeatureFamily) -> np.ndarray:
    """Monomial-basis coefficients of a polynomial family.

    Row k holds the coefficients of the k-th feature polynomial, so
    ``features(x) = C @ (1, x, ..., x^degree)``.  Undefined for
    normalized-affine.
    """
    if family.kind not in _POLYNOMIAL_KINDS:
        raise ValueError(f"{family.kind} has no monomial coefficient matrix")
    n = family.dim
    c = np.zeros((n, n))
    c[0, 0] = 1.0
    if family.kind == "monomial":
        return np.eye(n)
    if n > 1:
        c[1, 1] = 1.0
    for k in range(1, n - 1):
        shifted = np.roll(c[k], 1)
        shifted[0] = 0.0
        if family.kind == "legendre":
            c[k + 1] = ((2 * k + 1) * shifted - k * c[k - 1]) / (k + 1)
        else:  # hermite
            c[k + 1] = shifted - k * c[k - 1]
    if family.kind == "legendre":
        c *= np.sqrt(2.0 * np.arange(n) + 1.0)[:, None]
    elif family.hermite_normalized:
        c /= np.sqrt([math.factorial(k) for k in range(n)])[:, None]
    return c


def gram_matrix(family: FeatureFamily, measure: str = "uniform") -> np.ndarray:
    """Exact Gram matrix ``int phi phi^T dQ`` of a polynomial family.

    Only the uniform probability measure on [-1, 1] is supported; the Gram is
    assembled from the closed-form monomial moments (0 for odd powers,
    1/(p+1) for even p).
    """
    if measure != "uniform":
        raise ValueError(f"unsupported measure {measure!r}")
    if family.kind not in _POLYNOMIAL_KINDS:
        raise ValueError(f"no closed-form gram for family {family.kind!r}")
    c = coefficient_matrix(family)
    n = family.dim
    powers = np.arange(n)[:, None] + np.arange(n)[None, :]
    moments = np.where(powers % 2 == 0, 1.0 / (powers + 1.0), 0.0)
    return c @ moments @ c.T


def basis_transform(source: FeatureFamily, target: FeatureFamily) -> np.ndarray:
    """Matrix M with ``target features = M^{-1} @ source features``.

    Suitable as the per-mode transform of a change of basis that re-expresses
    a model from ``source`` features to ``target`` features of equal degree.
    """
    if source.dim != target.dim:
        raise ValueError("families must have equal dimension")
    c_src = coefficient_matrix(source)
    c_tgt = coefficient_matrix(target)
    return c_src @ np.linalg.inv(c_tgt)
