"""Loss functions, output cotangents, and Gauss-Newton weight factors.

Two loss kinds are supported on batches of model outputs z (m, n_0):

``least-squares``
    (1/m) sum_i ||z_i - y_i||^2 with cotangent rows 2 (z_i - y_i).
``logistic``
    Multinomial cross-entropy -(1/m) sum_i sum_j y_ij log softmax(z_i)_j for
    one-hot targets, cotangent rows softmax(z_i) - y_i.

The 1/m averaging weight is applied by the caller (it is the backprop
weight), so cotangents are per-sample quantities.

For the Gauss-Newton/Fisher operator, the per-sample output-space curvature
is C(z) = I for least squares and C(z) = diag(p) - p p^T with p = softmax(z)
for logistic.  ``gn_weight_factors`` returns vectors w_1..w_{n_0} with
sum_j w_j w_j^T = C(z) exactly; ``sample_gn_weight_factor`` draws a single w
with E[w w^T] = C(z).
"""

from __future__ import annotations

import numpy as np

from .sampling import categorical_rows

__all__ = [
    "LOSS_KINDS",
    "softmax",
    "loss_and_cotangents",
    "gn_weight_factors",
    "sample_gn_weight_factors",
    "sample_gn_weight_factor",
    "output_curvature",
    "accuracy",
]

LOSS_KINDS = ("least-squares", "logistic")


def _check_kind(kind: str) -> None:
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, with max subtraction for stability."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(targets: np.ndarray) -> None:
    ok = (
        np.all((targets == 0.0) | (targets == 1.0))
        and np.all(targets.sum(axis=1) == 1.0)
    )
    if not ok:
        raise ValueError("logistic targets must be one-hot rows")


def loss_and_cotangents(
    kind: str, outputs: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Batch loss and the per-sample output cotangents."""
    _check_kind(kind)
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ValueError(
            f"outputs {outputs.shape} and targets {targets.shape} disagree"
        )
    m = outputs.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    if kind == "least-squares":
        resid = outputs - targets
        return float(np.sum(resid * resid) / m), 2.0 * resid
    _check_one_hot(targets)
    # log softmax via the log-sum-exp trick
    shifted = outputs - outputs.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = float(-np.sum(targets * log_probs) / m)
    return loss, softmax(outputs) - targets


def gn_weight_factors(kind: str, z: np.ndarray) -> list[np.ndarray]:
    """Factor vectors w_1..w_{n_0} of the output curvature at one logit z.

    Least squares: w_j = e_j.  Logistic: w_j = sqrt(p_j) (e_j - p) with
    p = softmax(z), so that sum_j w_j w_j^T = diag(p) - p p^T exactly.
    """
    _check_kind(kind)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("z must be a single logit vector")
    n = z.shape[0]
    if kind == "least-squares":
        return [e.copy() for e in np.eye(n)]
    p = softmax(z)
    return [np.sqrt(p[j]) * (_unit(n, j) - p) for j in range(n)]


def _unit(n: int, j: int) -> np.ndarray:
    e = np.zeros(n)
    e[j] = 1.0
    return e


def output_curvature(kind: str, z: np.ndarray) -> np.ndarray:
    """Closed form of the per-sample curvature C(z); rows sum to zero for
    logistic."""
    _check_kind(kind)
    z = np.asarray(z, dtype=np.float64)
    if kind == "least-squares":
        return np.eye(z.shape[0])
    p = softmax(z)
    return np.diag(p) - np.outer(p, p)


def sample_gn_weight_factors(
    kind: str, z: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One-shot weight factor per row of a logit batch, shape like ``z``.

    Logistic: draw k ~ softmax(z) and return e_k - softmax(z), the unbiased
    single-draw factor (E[w w^T] = C(z)).  Least squares: k uniform and
    w = sqrt(n_0) e_k, so E[w w^T] = I.  Deterministic given the generator
    state.
    """
    _check_kind(kind)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("z must be a batch of logit rows")
    m, n = z.shape
    if kind == "least-squares":
        draws = categorical_rows(rng, np.full((m, n), 1.0 / n))
        w = np.zeros((m, n))
        w[np.arange(m), draws] = np.sqrt(n)
        return w
    p = softmax(z)
    draws = categorical_rows(rng, p)
    w = -p.copy()
    w[np.arange(m), draws] += 1.0
    return w


def sample_gn_weight_factor(
    kind: str, z: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Single-logit convenience wrapper around :func:`sample_gn_weight_factors`."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("z must be a single logit vector")
    return sample_gn_weight_factors(kind, z[None, :], rng)[0]


def accuracy(outputs: np.ndarray, targets_one_hot: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the one-hot target."""
    pred = np.asarray(outputs).argmax(axis=1)
    truth = np.asarray(targets_one_hot).argmax(axis=1)
    return float(np.mean(pred == truth))
