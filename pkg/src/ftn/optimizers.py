"""Riemannian optimizers: gradient descent and natural-gradient variants.

Methods (the strings used in configs and traces):

``grad``
    Steepest descent on the horizontal gradient, optionally with transported
    momentum (beta1 > 0).
``ngrad``
    Natural gradient: solve the full regularized Gauss-Newton system by
    conjugate gradients each iteration.
``bd-ngrad`` / ``bdo-ngrad``
    Block-diagonal approximation, solved per node; the ``bdo`` variant
    assembles one sampled weight factor per sample instead of all n_0.
``d-ngrad``
    Diagonal approximation: per-node Rayleigh-quotient eigenvalue estimates,
    exponentially averaged (beta2), scale the gradient blocks; momentum
    (beta1) is transported through the retraction.

Step lengths come from a two-way Armijo backtracking line search with memory
(deterministic runs) or a fixed step (stochastic runs).  One iteration is one
parameter update; minibatch runs draw consecutive slices of a per-epoch
shuffled permutation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStepError, LineSearchError, NumericalError
from .features import FeatureBatch
from .gauss_newton import (
    apply,
    assemble_factors,
    block_max_eig,
    cg_solve,
    solve_block_diag,
)
from .geometry import horizontal_project, inner, qr_retract, transport, zero_horizontal
from .losses import LOSS_KINDS, accuracy, loss_and_cotangents
from .model import HorizontalTangent, TtnParams, backprop, bottom_up_messages, forward

__all__ = [
    "METHODS",
    "OptimizerConfig",
    "TraceRecord",
    "TrainingData",
    "StepInfo",
    "ArmijoLineSearch",
    "DngradState",
    "riemannian_gradient",
    "armijo_backtracking",
    "step_grad",
    "step_ngrad",
    "step_block_diag",
    "step_diag_ngrad",
    "predict",
    "run",
]

log = logging.getLogger(__name__)

METHODS = ("grad", "ngrad", "bd-ngrad", "bdo-ngrad", "d-ngrad")


@dataclass
class OptimizerConfig:
    method: str = "grad"
    step_rule: str = "armijo"  # or "fixed"
    gamma0: float = 1.0  # initial Armijo step
    gamma: float = 1.0  # fixed step
    armijo_c: float = 1e-4
    max_doublings: int = 10
    max_halvings: int = 40
    beta1: float = 0.0  # momentum decay
    beta2: float = 0.0  # eigenvalue-average decay (d-ngrad)
    regularization: float = 5e-3
    batch_size: int = 0  # 0 = full batch
    max_iters: int = 100
    seed: int = 0
    cg_tol: float = 1e-6
    cg_max_iter: int = 250
    power_iters: int = 0
    eval_every: int = 10

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_rule not in ("armijo", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.gamma <= 0.0 or self.gamma0 <= 0.0:
            raise ValueError("step lengths must be positive")
        if not 0.0 < self.armijo_c < 1.0:
            raise ValueError("the Armijo constant must lie in (0, 1)")
        if self.regularization < 0.0:
            raise ValueError("regularization must be nonnegative")
        if self.max_iters < 0 or self.batch_size < 0:
            raise ValueError("max_iters and batch_size must be nonnegative")
        if self.cg_tol <= 0.0 or self.cg_max_iter < 1:
            raise ValueError("invalid conjugate-gradient settings")
        if self.eval_every < 1 or self.power_iters < 0:
            raise ValueError("eval_every must be >= 1 and power_iters >= 0")


@dataclass
class TraceRecord:
    iteration: int
    seconds: float
    train_loss: float
    step_size: float
    test_accuracy: float | None
    method: str


@dataclass
class TrainingData:
    kind: str
    train_features: FeatureBatch
    train_targets: np.ndarray
    test_features: FeatureBatch | None = None
    test_targets: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.train_targets.shape[0] != self.train_features.num_samples:
            raise ValueError("training targets and features disagree in length")


@dataclass
class StepInfo:
    """Per-iteration diagnostics passed to ``run``'s callback."""

    iteration: int
    params: TtnParams
    gradient: HorizontalTangent
    direction: HorizontalTangent
    step_size: float
    train_loss: float


def riemannian_gradient(
    params: TtnParams,
    batch: FeatureBatch,
    targets: np.ndarray,
    kind: str,
    messages: list[np.ndarray] | None = None,
) -> HorizontalTangent:
    """Horizontal gradient of the batch empirical risk at ``params``."""
    grad, _, _ = _gradient_with_loss(params, batch, targets, kind, messages)
    return grad


def _gradient_with_loss(params, batch, targets, kind, messages=None):
    if messages is None:
        messages = bottom_up_messages(params, batch)
    outputs = messages[params.topology.root]
    loss, cotangents = loss_and_cotangents(kind, outputs, targets)
    raw = backprop(
        params, batch, cotangents, weight=1.0 / batch.num_samples, messages=messages
    )
    return horizontal_project(params, raw), loss, messages


def armijo_backtracking(
    eval_loss,
    base_loss: float,
    directional_derivative: float,
    gamma_init: float,
    c: float = 1e-4,
    max_doublings: int = 10,
    max_halvings: int = 40,
) -> float:
    """Two-way backtracking: largest acceptable step of the form
    ``gamma_init * 2**k``.

    ``eval_loss(gamma)`` evaluates the objective at step ``gamma`` along the
    search direction; acceptance is the sufficient-decrease test
    ``loss <= base_loss + c * gamma * directional_derivative``.  If the
    initial step passes, it is doubled while it keeps passing (at most
    ``max_doublings`` times); otherwise it is halved until it passes.

    Raises
    ------
    LineSearchError
        If no step passes within ``max_halvings`` halvings (typically a
        non-descent direction or a broken gradient).
    """
    if directional_derivative >= 0.0:
        raise LineSearchError(
            f"not a descent direction (slope {directional_derivative:g})"
        )

    def acceptable(gamma: float) -> bool:
        value = eval_loss(gamma)
        return value <= base_loss + c * gamma * directional_derivative

    gamma = gamma_init
    if acceptable(gamma):
        for _ in range(max_doublings):
            if not acceptable(2.0 * gamma):
                break
            gamma *= 2.0
        return gamma
    for _ in range(max_halvings):
        gamma *= 0.5
        if acceptable(gamma):
            return gamma
    raise LineSearchError(
        f"no acceptable step within {max_halvings} halvings from {gamma_init:g}"
    )


class ArmijoLineSearch:
    """Armijo backtracking that remembers the accepted step across calls."""

    def __init__(self, cfg: OptimizerConfig):
        self.gamma = cfg.gamma0
        self.c = cfg.armijo_c
        self.max_doublings = cfg.max_doublings
        self.max_halvings = cfg.max_halvings

    def search(self, eval_loss, base_loss: float, slope: float) -> float:
        self.gamma = armijo_backtracking(
            eval_loss,
            base_loss,
            slope,
            self.gamma,
            self.c,
            self.max_doublings,
            self.max_halvings,
        )
        return self.gamma


def _combine(scale_old: float, old, scale_new: float, new) -> HorizontalTangent:
    """scale_old * old + scale_new * new, blockwise (bases must match)."""
    blocks = [
        scale_old * a + scale_new * b for a, b in zip(old.blocks, new.blocks)
    ]
    return HorizontalTangent(blocks, new.base)


def _tangent_norm(t) -> float:
    return math.sqrt(inner(t, t))


def _take_step(params, batch, targets, kind, cfg, direction, gradient, base_loss, line_search):
    """Line search (or fixed step) along ``-direction`` and retract.

    Returns (new_params, gamma, loss_after).
    """
    cache: dict[float, tuple[TtnParams, float]] = {}

    def trial(gamma: float) -> tuple[TtnParams, float]:
        if gamma not in cache:
            try:
                stepped = qr_retract(params, direction, -gamma)
                out = forward(stepped, batch)
                value = loss_and_cotangents(kind, out, targets)[0]
            except DegenerateStepError:
                stepped, value = None, np.inf
            cache[gamma] = (stepped, value)
        return cache[gamma]

    if cfg.step_rule == "fixed":
        gamma = cfg.gamma
        stepped, value = trial(gamma)
        if stepped is None:
            raise DegenerateStepError(f"fixed step {gamma:g} collapsed a bond rank")
        if not np.isfinite(value):
            raise NumericalError(f"fixed step {gamma:g} produced a non-finite loss")
        return stepped, gamma, value

    slope = -inner(gradient, direction)
    gamma = line_search.search(lambda g: trial(g)[1], base_loss, slope)
    stepped, value = cache[gamma]
    return stepped, gamma, value


def step_grad(params, batch, targets, kind, cfg, line_search=None, momentum=None):
    """One (momentum) gradient step; returns (params, record, diagnostics)."""
    grad, loss, _ = _gradient_with_loss(params, batch, targets, kind)
    if cfg.beta1 > 0.0 and momentum is not None:
        direction = _combine(cfg.beta1, momentum, 1.0 - cfg.beta1, grad)
    else:
        direction = grad
    return _finish_step(
        params, batch, targets, kind, cfg, direction, grad, loss, line_search
    )


def step_ngrad(params, batch, targets, kind, cfg, line_search=None):
    """One natural-gradient step: solve the full system by CG, then retract."""
    grad, loss, messages = _gradient_with_loss(params, batch, targets, kind)
    fs = assemble_factors(
        params, batch, kind,
        mode="full", regularization=cfg.regularization, messages=messages,
    )
    if _tangent_norm(grad) == 0.0:
        direction = grad
    else:
        direction = cg_solve(
            lambda z: apply(fs, z), grad, cfg.cg_tol, cfg.cg_max_iter
        )
    return _finish_step(
        params, batch, targets, kind, cfg, direction, grad, loss, line_search
    )


def step_block_diag(
    params, batch, targets, kind, cfg, line_search=None, one_shot=False, rng=None
):
    """One block-diagonal natural-gradient step (full or one-shot factors)."""
    grad, loss, messages = _gradient_with_loss(params, batch, targets, kind)
    fs = assemble_factors(
        params, batch, kind,
        mode="one-shot" if one_shot else "full",
        rng=rng, regularization=cfg.regularization, messages=messages,
    )
    if _tangent_norm(grad) == 0.0:
        direction = grad
    else:
        direction = solve_block_diag(fs, grad, cfg.cg_tol, cfg.cg_max_iter)
    return _finish_step(
        params, batch, targets, kind, cfg, direction, grad, loss, line_search
    )


@dataclass
class DngradState:
    """Carried state of the diagonal natural-gradient method."""

    params: TtnParams
    momentum: HorizontalTangent
    block_eigs: np.ndarray  # exponentially averaged per-core estimates
    iteration: int = 0

    @classmethod
    def fresh(cls, params: TtnParams) -> "DngradState":
        return cls(params, zero_horizontal(params), np.ones(len(params.cores)))


def step_diag_ngrad(state: DngradState, batch, targets, kind, cfg, line_search=None, rng=None):
    """One diagonal natural-gradient step; returns (state, record, diagnostics).

    Per-core top-eigenvalue estimates are Rayleigh quotients of the one-shot
    block operator at the gradient blocks, exponentially averaged with beta2
    (initialized at 1); the update direction is the momentum average (beta1)
    of the eigenvalue-scaled gradient.  Momentum is transported to the new
    point after the retraction.
    """
    params = state.params
    grad, loss, messages = _gradient_with_loss(params, batch, targets, kind)
    fs = assemble_factors(
        params, batch, kind,
        mode="one-shot", rng=rng, regularization=cfg.regularization,
        messages=messages,
    )
    eigs = state.block_eigs.copy()
    scaled_blocks = []
    for k, g_block in enumerate(grad.blocks):
        if np.linalg.norm(g_block) > 0.0:
            estimate = block_max_eig(fs, k, g_block, cfg.power_iters)
            eigs[k] = cfg.beta2 * eigs[k] + (1.0 - cfg.beta2) * estimate
        scaled_blocks.append(g_block / eigs[k])
    scaled = HorizontalTangent(scaled_blocks, params)
    direction = _combine(cfg.beta1, state.momentum, 1.0 - cfg.beta1, scaled)

    new_params, record, info = _finish_step(
        params, batch, targets, kind, cfg, direction, grad, loss, line_search
    )
    new_state = DngradState(
        params=new_params,
        momentum=transport(new_params, direction),
        block_eigs=eigs,
        iteration=state.iteration + 1,
    )
    return new_state, record, info


def _finish_step(params, batch, targets, kind, cfg, direction, gradient, loss, line_search):
    if _tangent_norm(direction) == 0.0:
        record = TraceRecord(0, 0.0, loss, 0.0, None, cfg.method)
        info = StepInfo(0, params, gradient, direction, 0.0, loss)
        return params, record, info
    if line_search is None and cfg.step_rule == "armijo":
        line_search = ArmijoLineSearch(cfg)
    new_params, gamma, loss_after = _take_step(
        params, batch, targets, kind, cfg, direction, gradient, loss, line_search
    )
    record = TraceRecord(0, 0.0, loss_after, gamma, None, cfg.method)
    info = StepInfo(0, new_params, gradient, direction, gamma, loss_after)
    return new_params, record, info


def predict(params: TtnParams, features: FeatureBatch, chunk: int = 4096) -> np.ndarray:
    """Forward pass in chunks to bound peak memory on large sets."""
    m = features.num_samples
    if m <= chunk:
        return forward(params, features)
    parts = [
        forward(params, features.take(slice(lo, min(lo + chunk, m))))
        for lo in range(0, m, chunk)
    ]
    return np.concatenate(parts, axis=0)


class _Batcher:
    """Yields minibatch index arrays from a per-epoch shuffled permutation."""

    def __init__(self, m: int, batch_size: int, rng: np.random.Generator):
        self.m = m
        self.batch_size = min(batch_size, m) if batch_size > 0 else m
        self.rng = rng
        self.order = np.arange(m)
        self.cursor = m  # force a shuffle on first use when stochastic

    def next_indices(self) -> np.ndarray:
        if self.batch_size == self.m:
            return self.order
        if self.cursor + self.batch_size > self.m:
            self.order = self.rng.permutation(self.m)
            self.cursor = 0
        sel = self.order[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return sel


def run(cfg: OptimizerConfig, params: TtnParams, data: TrainingData, on_step=None):
    """Optimize ``params`` on ``data`` per the config.

    Returns ``(params, trace)`` where the trace has one record per iteration
    plus an initial row for the starting point.  Test accuracy is evaluated
    every ``eval_every`` iterations (and at the last one) when the data
    carries a test split and the loss is logistic.  A failed line search
    stops early and returns the best iterate seen.  Identical configs and
    seeds reproduce the numeric trace columns exactly.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    batcher = _Batcher(data.train_features.num_samples, cfg.batch_size, rng)
    full_batch = cfg.batch_size == 0 or cfg.batch_size >= data.train_features.num_samples
    line_search = ArmijoLineSearch(cfg) if cfg.step_rule == "armijo" else None
    kind = data.kind

    def test_accuracy() -> float | None:
        if data.test_features is None or kind != "logistic":
            return None
        outputs = predict(params, data.test_features)
        return accuracy(outputs, data.test_targets)

    start = time.perf_counter()
    initial_loss = loss_and_cotangents(
        kind, predict(params, data.train_features), data.train_targets
    )[0]
    trace = [
        TraceRecord(0, 0.0, initial_loss, 0.0, test_accuracy(), cfg.method)
    ]
    best_loss, best_params = initial_loss, params
    momentum = None
    dstate = DngradState.fresh(params) if cfg.method == "d-ngrad" else None

    for it in range(1, cfg.max_iters + 1):
        idx = batcher.next_indices()
        if full_batch:
            batch, targets = data.train_features, data.train_targets
        else:
            batch, targets = data.train_features.take(idx), data.train_targets[idx]
        try:
            if cfg.method == "grad":
                params, record, info = step_grad(
                    params, batch, targets, kind, cfg, line_search, momentum
                )
                if cfg.beta1 > 0.0:
                    momentum = transport(params, info.direction)
            elif cfg.method == "ngrad":
                params, record, info = step_ngrad(
                    params, batch, targets, kind, cfg, line_search
                )
            elif cfg.method in ("bd-ngrad", "bdo-ngrad"):
                params, record, info = step_block_diag(
                    params, batch, targets, kind, cfg, line_search,
                    one_shot=cfg.method == "bdo-ngrad", rng=rng,
                )
            else:  # d-ngrad
                dstate, record, info = step_diag_ngrad(
                    dstate, batch, targets, kind, cfg, line_search, rng
                )
                params = dstate.params
        except LineSearchError as err:
            log.warning("iteration %d: %s; stopping with best iterate", it, err)
            params = best_params
            break

        record.iteration = it
        record.seconds = time.perf_counter() - start
        if it % cfg.eval_every == 0 or it == cfg.max_iters:
            record.test_accuracy = test_accuracy()
        trace.append(record)
        if record.train_loss <= best_loss:
            best_loss, best_params = record.train_loss, params
        if on_step is not None:
            info.iteration = it
            on_step(info)

    return params, trace
