"""Matrix-free empirical Gauss-Newton operator on the horizontal space.

The operator at parameters Theta for a batch x_1..x_m is

    G[zeta] = (1/m) sum_{i,j} xi_ij <xi_ij, zeta> + lambda * zeta,

where each factor xi_ij is the horizontal projection of the backprop of one
weight-factor cotangent w_j(z_i) through one sample (full mode keeps all n_0
factors per sample, one-shot keeps a single sampled factor).

Because the per-sample features are rank one, the node-k block of every
factor is an outer product

    xi_ij|_k = below_k[i] (x) above_k[i, j]

of a projected bottom-up message (khatri-rao of the children's messages,
orthogonally projected at non-root nodes) and a top-down cotangent message.
:class:`GnFactorSet` stores exactly these message arrays, batched per node;
that is the same factor list in factored form (``factor(i, j)`` materializes
any single one) and makes operator applications a handful of matrix products
per node.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import NumericalError
from .features import FeatureBatch
from .kernels import khatri_rao
from .losses import sample_gn_weight_factors, softmax
from .model import (
    HorizontalTangent,
    TtnParams,
    _top_down_messages,
    bottom_up_messages,
    unfold_core,
)

__all__ = [
    "GnFactorSet",
    "assemble_factors",
    "apply",
    "apply_block_diag",
    "cg_solve",
    "solve_block_diag",
    "block_max_eig",
]

log = logging.getLogger(__name__)


class GnFactorSet:
    """Factors of the empirical Gauss-Newton operator at one base point.

    ``below[k]`` has shape (m, rL * rR) and ``above[k]`` shape (m, J, r_k)
    for core index k; factor (i, j) restricted to node k is the outer product
    of the corresponding rows.  ``regularization`` is the lambda added to the
    operator, ``num_samples`` the averaging weight's m.
    """

    __slots__ = ("base", "below", "above", "num_samples", "regularization")

    def __init__(self, base, below, above, num_samples, regularization):
        self.base: TtnParams = base
        self.below: list[np.ndarray] = below
        self.above: list[np.ndarray] = above
        self.num_samples: int = num_samples
        self.regularization: float = regularization

    @property
    def factors_per_sample(self) -> int:
        return self.above[0].shape[1]

    @property
    def num_factors(self) -> int:
        return self.num_samples * self.factors_per_sample

    def factor(self, i: int, j: int) -> HorizontalTangent:
        """Materialize the horizontal tangent of factor (sample i, class j)."""
        blocks = []
        for k, core in enumerate(self.base.cores):
            blocks.append(
                np.outer(self.below[k][i], self.above[k][i, j]).reshape(core.shape)
            )
        return HorizontalTangent(blocks, self.base)


def _check_base(fs: GnFactorSet, zeta: HorizontalTangent) -> None:
    if not isinstance(zeta, HorizontalTangent) or zeta.base is not fs.base:
        raise ValueError("tangent is not horizontal at the factor set's base point")


def assemble_factors(
    params: TtnParams,
    batch: FeatureBatch,
    kind: str,
    mode: str = "full",
    rng: np.random.Generator | None = None,
    regularization: float = 5e-3,
    messages: list[np.ndarray] | None = None,
) -> GnFactorSet:
    """Build the factor set for a batch.

    ``mode='full'`` keeps all n_0 weight factors per sample; ``mode='one-shot'``
    draws a single factor per sample (requires ``rng``) whose expectation over
    the draw reproduces the full operator.
    """
    if mode not in ("full", "one-shot"):
        raise ValueError(f"unknown factor mode {mode!r}")
    if messages is None:
        messages = bottom_up_messages(params, batch)
    topo = params.topology
    m = batch.num_samples
    n0 = topo.output_dim
    z = messages[topo.root]

    if mode == "one-shot":
        if rng is None:
            raise ValueError("one-shot mode needs a random generator")
        cotangents = sample_gn_weight_factors(kind, z, rng)[:, None, :]
    elif kind == "least-squares":
        cotangents = np.tile(np.eye(n0)[None, :, :], (m, 1, 1))
    else:
        p = softmax(z)
        cotangents = np.sqrt(p)[:, :, None] * (np.eye(n0)[None, :, :] - p[:, None, :])

    above_msgs = _top_down_messages(params, messages, cotangents)

    below: list[np.ndarray] = []
    above: list[np.ndarray] = []
    for node in topo.internal_ids:
        left, right = topo.children[node]
        kr = khatri_rao(messages[left], messages[right])
        if node != topo.root:
            a = unfold_core(params.core(node))
            kr = kr - (kr @ a) @ a.T
        below.append(kr)
        above.append(above_msgs[node])
    return GnFactorSet(params, below, above, m, float(regularization))


def apply(fs: GnFactorSet, zeta: HorizontalTangent) -> HorizontalTangent:
    """Full operator action (1/m) sum xi <xi, zeta> + lambda zeta."""
    _check_base(fs, zeta)
    mats = [unfold_core(b) for b in zeta.blocks]
    scores = 0.0
    for k in range(len(mats)):
        t = fs.below[k] @ mats[k]
        scores = scores + np.einsum("it,ijt->ij", t, fs.above[k])
    blocks = []
    for k, mat in enumerate(mats):
        v = np.einsum("ij,ijt->it", scores, fs.above[k])
        out = (fs.below[k].T @ v) / fs.num_samples + fs.regularization * mat
        blocks.append(out.reshape(zeta.blocks[k].shape))
    return HorizontalTangent(blocks, fs.base)


def _block_matvec(fs: GnFactorSet, k: int, mat: np.ndarray) -> np.ndarray:
    """Node-k diagonal block acting on an unfolded tangent block."""
    t = fs.below[k] @ mat
    s = np.einsum("it,ijt->ij", t, fs.above[k])
    v = np.einsum("ij,ijt->it", s, fs.above[k])
    return (fs.below[k].T @ v) / fs.num_samples + fs.regularization * mat


def apply_block_diag(fs: GnFactorSet, zeta: HorizontalTangent) -> HorizontalTangent:
    """Block-diagonal operator action: each node sees only its own block."""
    _check_base(fs, zeta)
    blocks = []
    for k, b in enumerate(zeta.blocks):
        blocks.append(_block_matvec(fs, k, unfold_core(b)).reshape(b.shape))
    return HorizontalTangent(blocks, fs.base)


def _cg_flat(matvec, b: np.ndarray, tol: float, max_iter: int, what: str):
    """Conjugate gradients on flat arrays; returns (x, converged)."""
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return x, True
    r = b.copy()
    p = r.copy()
    rs_old = float(r @ r)
    threshold = tol * b_norm
    for _ in range(max_iter):
        ap = matvec(p)
        denom = float(p @ ap)
        if not np.isfinite(denom) or denom <= 0.0:
            raise NumericalError(
                f"{what}: conjugate gradients hit a non-positive curvature "
                f"value ({denom}); the operator is not positive definite"
            )
        alpha = rs_old / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise NumericalError(f"{what}: non-finite residual in conjugate gradients")
        if np.sqrt(rs_new) <= threshold:
            return x, True
        p = r + (rs_new / rs_old) * p
        rs_old = rs_new
    log.warning(
        "%s: conjugate gradients stopped at max_iter=%d with relative "
        "residual %.3e", what, max_iter, np.sqrt(rs_old) / b_norm,
    )
    return x, False


def _pack(blocks: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([b.ravel() for b in blocks])


def _unpack_like(vec: np.ndarray, template: HorizontalTangent) -> HorizontalTangent:
    blocks = []
    pos = 0
    for b in template.blocks:
        blocks.append(vec[pos : pos + b.size].reshape(b.shape))
        pos += b.size
    return HorizontalTangent(blocks, template.base)


def cg_solve(
    operator,
    rhs: HorizontalTangent,
    tol: float = 1e-6,
    max_iter: int = 250,
) -> HorizontalTangent:
    """Solve ``operator(zeta) = rhs`` by conjugate gradients.

    ``operator`` is a symmetric positive definite map on horizontal tangents
    (typically a partial application of :func:`apply` or
    :func:`apply_block_diag`).  Starts from zero, stops when the residual
    drops below ``tol * ||rhs||``; hitting ``max_iter`` logs a warning and
    returns the current iterate.
    """

    def matvec(vec: np.ndarray) -> np.ndarray:
        return _pack(operator(_unpack_like(vec, rhs)).blocks)

    x, _ = _cg_flat(matvec, _pack(rhs.blocks), tol, max_iter, "cg_solve")
    return _unpack_like(x, rhs)


def solve_block_diag(
    fs: GnFactorSet,
    rhs: HorizontalTangent,
    tol: float = 1e-6,
    max_iter: int = 250,
) -> HorizontalTangent:
    """Solve the block-diagonal system node by node."""
    _check_base(fs, rhs)
    blocks = []
    for k, b in enumerate(rhs.blocks):
        shape = unfold_core(b).shape

        def matvec(vec, k=k, shape=shape):
            return _block_matvec(fs, k, vec.reshape(shape)).ravel()

        x, _ = _cg_flat(matvec, b.ravel().copy(), tol, max_iter, f"block {k}")
        blocks.append(x.reshape(b.shape))
    return HorizontalTangent(blocks, fs.base)


def block_max_eig(
    fs: GnFactorSet,
    k: int,
    init: np.ndarray,
    power_iters: int = 0,
) -> float:
    """Rayleigh-quotient estimate of the top eigenvalue of diagonal block k.

    ``init`` must be a nonzero array of the block's shape; ``power_iters``
    rounds of power iteration refine the estimate (0 evaluates the Rayleigh
    quotient at ``init`` itself).  The estimate never exceeds the true top
    eigenvalue and grows monotonically with ``power_iters`` up to numerical
    noise.
    """
    x = np.asarray(init, dtype=np.float64).reshape(
        unfold_core(fs.base.cores[k]).shape
    ).copy()
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise ValueError("power iteration needs a nonzero start block")
    x /= norm
    for _ in range(power_iters):
        y = _block_matvec(fs, k, x)
        x = y / np.linalg.norm(y)
    return float(np.vdot(x, _block_matvec(fs, k, x)) / np.vdot(x, x))
