"""Dense reference implementations for small instances.

Everything here materializes objects the production code keeps implicit
(full coefficient tensors, explicit horizontal bases, dense curvature
matrices).  Exponential in the number of modes; intended for cross-checks
on tiny instances only.
"""

from __future__ import annotations

from functools import reduce

import numpy as np

from .features import FeatureBatch
from .kernels import khatri_rao
from .losses import output_curvature
from .model import (
    HorizontalTangent,
    TtnParams,
    forward,
    forward_jvp,
    unfold_core,
)

__all__ = [
    "materialize",
    "feature_rows",
    "dense_forward",
    "horizontal_basis",
    "coordinates",
    "from_coordinates",
    "densify_operator",
    "dense_gauss_newton",
    "top_eigenvalue",
]


def materialize(params: TtnParams) -> np.ndarray:
    """Full coefficient matrix, modes flattened row-major (first mode slowest).

    Shape (n_1 * ... * n_d, n_0).  The network's function is
    ``feature_rows(batch) @ materialize(params)``.
    """
    topo = params.topology
    tables: list[np.ndarray | None] = [None] * topo.num_nodes
    for leaf in range(topo.d):
        tables[leaf] = np.eye(topo.leaf_dims[leaf])
    for node in topo.internal_ids:
        left, right = topo.children[node]
        out = np.einsum(
            "ia,jb,abt->ijt", tables[left], tables[right], params.core(node)
        )
        tables[node] = out.reshape(-1, out.shape[2])
    return tables[topo.root]


def feature_rows(batch: FeatureBatch) -> np.ndarray:
    """Row-wise Kronecker product of all per-mode feature matrices."""
    return reduce(khatri_rao, batch.modes)


def dense_forward(params: TtnParams, batch: FeatureBatch) -> np.ndarray:
    return feature_rows(batch) @ materialize(params)


def horizontal_basis(params: TtnParams) -> list[HorizontalTangent]:
    """Orthonormal basis of the horizontal space as one-hot-style tangents.

    Non-root blocks run over products of a complement basis of the core's
    column span with unit vectors; the root block is unconstrained.
    """
    topo = params.topology
    basis: list[HorizontalTangent] = []
    for node in topo.internal_ids:
        shape = topo.core_shape(node)
        n, r = shape[0] * shape[1], shape[2]
        if node == topo.root:
            directions = np.eye(n)
        else:
            full, _ = np.linalg.qr(unfold_core(params.core(node)), mode="complete")
            directions = full[:, r:].T  # complement of the column span
        for direction in directions:
            for col in range(r):
                block = np.zeros((n, r))
                block[:, col] = direction
                blocks = [
                    np.zeros(topo.core_shape(other))
                    for other in topo.internal_ids
                ]
                blocks[node - topo.d] = block.reshape(shape)
                basis.append(HorizontalTangent(blocks, params))
    return basis


def coordinates(tangent, basis: list[HorizontalTangent]) -> np.ndarray:
    return np.array(
        [
            sum(np.vdot(a, b) for a, b in zip(element.blocks, tangent.blocks))
            for element in basis
        ]
    )


def from_coordinates(
    basis: list[HorizontalTangent], coords: np.ndarray
) -> HorizontalTangent:
    blocks = [np.zeros_like(b) for b in basis[0].blocks]
    for weight, element in zip(coords, basis):
        for k, block in enumerate(element.blocks):
            blocks[k] += weight * block
    return HorizontalTangent(blocks, basis[0].base)


def densify_operator(operator, basis: list[HorizontalTangent]) -> np.ndarray:
    """Matrix of a tangent-space operator in the given orthonormal basis."""
    columns = [coordinates(operator(element), basis) for element in basis]
    return np.stack(columns, axis=1)


def dense_gauss_newton(
    params: TtnParams,
    batch: FeatureBatch,
    kind: str,
    regularization: float,
    basis: list[HorizontalTangent],
) -> np.ndarray:
    """Curvature matrix assembled from per-sample directional derivatives.

    Entry (p, q) is the batch mean of ``jvp_p(x)^T C(z(x)) jvp_q(x)`` plus
    ``regularization`` on the diagonal, with C the output-space curvature of
    the loss.  An independent route to the factored operator.
    """
    jvps = np.stack(
        [forward_jvp(params, batch, element) for element in basis]
    )  # (P, m, n_0)
    outputs = forward(params, batch)
    curv = np.stack([output_curvature(kind, z) for z in outputs])  # (m, n0, n0)
    weighted = np.einsum("mij,qmj->qmi", curv, jvps)
    gram = np.einsum("pmi,qmi->pq", jvps, weighted) / batch.num_samples
    return gram + regularization * np.eye(len(basis))


def top_eigenvalue(matrix: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(matrix)[-1])


def gauge_transform(params: TtnParams, seed: int) -> TtnParams:
    """Rotate every internal bond by a random orthogonal matrix.

    The represented function is unchanged and all orthonormality constraints
    are preserved; only the parametrization moves.  Useful for invariance
    checks.
    """
    topo = params.topology
    rng = np.random.default_rng(seed)
    cores = [core.copy() for core in params.cores]
    for node in topo.internal_ids:
        if node == topo.root:
            continue
        r = topo.bond_dims[node]
        q = np.linalg.qr(rng.standard_normal((r, r)))[0]
        k = node - topo.d
        cores[k] = np.einsum("abt,tT->abT", cores[k], q)
        parent, side = topo.parent_of(node)
        pk = parent - topo.d
        if side == 0:
            cores[pk] = np.einsum("Aa,Abc->abc", q, cores[pk])
        else:
            cores[pk] = np.einsum("Bb,aBc->abc", q, cores[pk])
    return TtnParams(topo, tuple(cores))
