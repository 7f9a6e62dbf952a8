"""Quotient geometry of the tree-network manifold.

Points keep every non-root core's unfolding on a Stiefel manifold
(orthonormal columns); the root core is unconstrained.  The gauge freedom of
rotating a bond is removed by working in the horizontal space

    A_k^T delta_k = 0   (unfoldings, at every non-root node),

with the root block free.  All routines below stay in unfolded coordinates
and use the Euclidean inner product summed over blocks.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateStepError
from .kernels import thin_qr
from .model import (
    HorizontalTangent,
    TangentTuple,
    TtnParams,
    _check_tangent,
    unfold_core,
)

__all__ = [
    "horizontal_project",
    "qr_retract",
    "transport",
    "inner",
    "zero_horizontal",
]


def zero_horizontal(params: TtnParams) -> HorizontalTangent:
    return HorizontalTangent([np.zeros_like(c) for c in params.cores], params)


def inner(xi: TangentTuple, eta: TangentTuple) -> float:
    """Euclidean inner product summed over blocks."""
    if len(xi.blocks) != len(eta.blocks):
        raise ValueError("tangents have different block counts")
    total = 0.0
    for a, b in zip(xi.blocks, eta.blocks):
        if a.shape != b.shape:
            raise ValueError(f"block shape mismatch: {a.shape} vs {b.shape}")
        total += float(np.vdot(a, b))
    return total


def horizontal_project(params: TtnParams, tangent: TangentTuple) -> HorizontalTangent:
    """Project a tangent tuple onto the horizontal space at ``params``.

    Non-root blocks lose their component in the span of the core's columns:
    ``delta <- delta - A (A^T delta)`` on unfoldings; the root block passes
    through.  Idempotent and self-adjoint.
    """
    _check_tangent(params, tangent)
    topo = params.topology
    blocks = []
    for i, node in enumerate(topo.internal_ids):
        delta = tangent.blocks[i]
        if node == topo.root:
            blocks.append(delta.copy())
            continue
        a = unfold_core(params.cores[i])
        dmat = unfold_core(delta)
        blocks.append((dmat - a @ (a.T @ dmat)).reshape(delta.shape))
    return HorizontalTangent(blocks, params)


def transport(new_params: TtnParams, tangent: TangentTuple) -> HorizontalTangent:
    """Vector transport: re-project a tangent at a new base point."""
    return horizontal_project(new_params, tangent)


def qr_retract(params: TtnParams, direction: TangentTuple, step: float) -> TtnParams:
    """Retract ``params + step * direction`` back onto the manifold.

    Bottom-up sweep: at each non-root node, QR-factor the stepped unfolding,
    keep the orthonormal factor, and absorb the triangular factor into the
    parent's core and the parent's pending perturbation.  The root is updated
    additively with everything absorbed.  On a tree this re-gauges the
    additive update exactly, so retracting with step 0 returns the base point
    and the first-order retraction property holds by construction.

    Raises
    ------
    DegenerateStepError
        If a stepped unfolding loses rank (zero diagonal entry in R).
    """
    _check_tangent(params, direction)
    topo = params.topology
    cores = [c.copy() for c in params.cores]
    deltas = [b.copy() for b in direction.blocks]

    def absorb(parent: int, side: int, mat: np.ndarray) -> None:
        ci = parent - topo.d
        sub = "aA,Abc->abc" if side == 0 else "bB,aBc->abc"
        cores[ci] = np.einsum(sub, mat, cores[ci], optimize=True)
        deltas[ci] = np.einsum(sub, mat, deltas[ci], optimize=True)

    for node in topo.internal_ids:
        ci = node - topo.d
        if node == topo.root:
            cores[ci] = cores[ci] + step * deltas[ci]
            break
        stepped = unfold_core(cores[ci]) + step * unfold_core(deltas[ci])
        q, r = thin_qr(stepped)
        diag = np.diag(r)
        if diag.min() <= 1e-12 * max(diag.max(), 1.0):
            raise DegenerateStepError(
                f"rank collapse at node {topo.interval_label(node)} "
                f"(step {step:g})"
            )
        cores[ci] = q.reshape(cores[ci].shape)
        parent, side = topo.parent_of(node)
        absorb(parent, side, r)

    return TtnParams(topo, tuple(cores))
