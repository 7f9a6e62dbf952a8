"""Tiny-instance self-checks against dense reference implementations.

Every property materializes an independent oracle (dense coefficient tensor,
explicit horizontal basis, finite differences) and compares it against the
production code paths.  The whole suite runs in seconds.
"""

from __future__ import annotations

import numpy as np

from .features import FeatureFamily, eval_features
from .gauss_newton import apply, assemble_factors, cg_solve
from .geometry import horizontal_project, inner, qr_retract
from .losses import loss_and_cotangents
from .model import (
    TangentTuple,
    TtnParams,
    backprop,
    bottom_up_messages,
    forward,
    forward_jvp,
    load_checkpoint,
    random_init,
)
from .reference import (
    coordinates,
    dense_forward,
    dense_gauss_newton,
    densify_operator,
    from_coordinates,
    gauge_transform,
    horizontal_basis,
)
from .sampling import standard_normal
from .topology import build_balanced

__all__ = ["run_selftest", "PROPERTIES"]


def _tiny(seed: int, m: int = 8):
    topology = build_balanced([2, 2, 2, 2], 2, 2)
    params = random_init(topology, seed=seed)
    rng = np.random.default_rng(seed + 1)
    inputs = 2.0 * rng.random((m, 4)) - 1.0
    batch = eval_features(FeatureFamily("monomial", degree=1), inputs)
    ls_targets = standard_normal(rng, (m, 2))
    labels = rng.integers(0, 2, size=m)
    logit_targets = np.eye(2)[labels]
    return params, batch, ls_targets, logit_targets


def _random_horizontal(params: TtnParams, seed: int):
    rng = np.random.default_rng(seed)
    blocks = [
        standard_normal(rng, params.topology.core_shape(node))
        for node in params.topology.internal_ids
    ]
    return horizontal_project(params, TangentTuple(blocks))


def _gradient(params, batch, targets, kind):
    messages = bottom_up_messages(params, batch)
    _, cot = loss_and_cotangents(kind, messages[params.topology.root], targets)
    raw = backprop(params, batch, cot, weight=1.0 / batch.num_samples, messages=messages)
    return horizontal_project(params, raw)


def check_forward_dense() -> tuple[bool, str]:
    params, batch, _, _ = _tiny(7)
    err = np.abs(forward(params, batch) - dense_forward(params, batch)).max()
    return err <= 1e-12, f"max err {err:.2e}"


def check_adjoint_identity() -> tuple[bool, str]:
    params, batch, _, _ = _tiny(11)
    rng = np.random.default_rng(2)
    cot = standard_normal(rng, (batch.num_samples, 2))
    delta = _random_horizontal(params, 3)
    lhs = float(np.vdot(cot, forward_jvp(params, batch, delta)))
    grad = backprop(params, batch, cot)
    rhs = sum(float(np.vdot(g, d)) for g, d in zip(grad.blocks, delta.blocks))
    err = abs(lhs - rhs) / max(abs(lhs), 1.0)
    return err <= 1e-12, f"rel err {err:.2e}"


def check_gradient_fd() -> tuple[bool, str]:
    params, batch, ls_targets, logit_targets = _tiny(13)
    worst = 0.0
    h = 1e-5
    for kind, targets in (("least-squares", ls_targets), ("logistic", logit_targets)):
        grad = _gradient(params, batch, targets, kind)
        for trial in range(3):
            delta = _random_horizontal(params, 100 + trial)

            def risk(t: float) -> float:
                cores = tuple(
                    c + t * b for c, b in zip(params.cores, delta.blocks)
                )
                moved = TtnParams(params.topology, cores)
                return loss_and_cotangents(kind, forward(moved, batch), targets)[0]

            fd = (risk(h) - risk(-h)) / (2.0 * h)
            exact = inner(grad, delta)
            worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-12))
    return worst <= 1e-6, f"worst rel err {worst:.2e}"


def check_dense_gauss_newton() -> tuple[bool, str]:
    params, batch, ls_targets, logit_targets = _tiny(17)
    lam = 5e-3
    basis = horizontal_basis(params)
    worst_mat, worst_solve = 0.0, 0.0
    for kind, targets in (("least-squares", ls_targets), ("logistic", logit_targets)):
        fs = assemble_factors(params, batch, kind, regularization=lam)
        densified = densify_operator(lambda z: apply(fs, z), basis)
        dense = dense_gauss_newton(params, batch, kind, lam, basis)
        worst_mat = max(worst_mat, np.abs(densified - dense).max())

        rhs = _gradient(params, batch, targets, kind)
        # the residual tolerance must sit well below the comparison bound
        solved = cg_solve(lambda z: apply(fs, z), rhs, tol=1e-10)
        direct = from_coordinates(
            basis, np.linalg.solve(dense, coordinates(rhs, basis))
        )
        num = sum(
            np.abs(a - b).max() for a, b in zip(solved.blocks, direct.blocks)
        )
        worst_solve = max(worst_solve, num)
    ok = worst_mat <= 1e-9 and worst_solve <= 1e-6
    return ok, f"matrix err {worst_mat:.2e}, solve err {worst_solve:.2e}"


def check_retraction_order() -> tuple[bool, str]:
    params, _, _, _ = _tiny(19)
    delta = _random_horizontal(params, 23)
    gammas = np.geomspace(1e-4, 1e-2, 7)
    errs = []
    for gamma in gammas:
        moved = qr_retract(params, delta, gamma)
        err = np.sqrt(
            sum(
                np.sum((mc - (c + gamma * b)) ** 2)
                for mc, c, b in zip(moved.cores, params.cores, delta.blocks)
            )
        )
        errs.append(err)
    errs = np.array(errs)
    if errs.max() < 1e-14:
        return True, "retraction exact on this instance"
    order = np.polyfit(np.log(gammas), np.log(errs), 1)[0]
    zero_step = qr_retract(params, delta, 0.0)
    exact = max(
        np.abs(a - b).max() for a, b in zip(zero_step.cores, params.cores)
    )
    return order >= 1.9 and exact <= 1e-12, f"fitted order {order:.3f}, step-0 err {exact:.1e}"


def check_projection() -> tuple[bool, str]:
    params, _, _, _ = _tiny(29)
    rng = np.random.default_rng(5)
    raw_a = TangentTuple(
        [standard_normal(rng, params.topology.core_shape(n))
         for n in params.topology.internal_ids]
    )
    raw_b = TangentTuple(
        [standard_normal(rng, params.topology.core_shape(n))
         for n in params.topology.internal_ids]
    )
    once = horizontal_project(params, raw_a)
    twice = horizontal_project(params, once)
    idem = max(np.abs(a - b).max() for a, b in zip(once.blocks, twice.blocks))
    pb = horizontal_project(params, raw_b)
    lhs = sum(float(np.vdot(a, b)) for a, b in zip(once.blocks, raw_b.blocks))
    rhs = sum(float(np.vdot(a, b)) for a, b in zip(raw_a.blocks, pb.blocks))
    self_adj = abs(lhs - rhs)
    ok = idem <= 1e-12 and self_adj <= 1e-12
    return ok, f"idempotency {idem:.2e}, self-adjointness {self_adj:.2e}"


def check_gauge_invariance() -> tuple[bool, str]:
    params, batch, ls_targets, _ = _tiny(31)
    gauged = gauge_transform(params, seed=41)
    out_err = np.abs(forward(params, batch) - forward(gauged, batch)).max()
    g1 = _gradient(params, batch, ls_targets, "least-squares")
    g2 = _gradient(gauged, batch, ls_targets, "least-squares")
    jvp_err = np.abs(
        forward_jvp(params, batch, g1) - forward_jvp(gauged, batch, g2)
    ).max()
    ok = out_err <= 1e-10 and jvp_err <= 1e-10
    return ok, f"output err {out_err:.2e}, gradient-image err {jvp_err:.2e}"


def check_training_stiefel() -> tuple[bool, str]:
    from .optimizers import OptimizerConfig, TrainingData, run

    params, batch, ls_targets, _ = _tiny(37, m=16)
    cfg = OptimizerConfig(method="ngrad", max_iters=25, seed=0)
    defects = []
    data = TrainingData("least-squares", batch, ls_targets)
    run(cfg, params, data, on_step=lambda info: defects.append(info.params.stiefel_defect()))
    worst = max(defects) if defects else 0.0
    return worst <= 1e-10 and len(defects) == 25, f"worst defect {worst:.2e}"


def check_checkpoint(path: str) -> tuple[bool, str]:
    params = load_checkpoint(path)
    defect = params.stiefel_defect()
    return defect <= 1e-10, f"orthonormality defect {defect:.2e}"


PROPERTIES = [
    ("forward-dense-equivalence", check_forward_dense),
    ("adjoint-identity", check_adjoint_identity),
    ("gradient-finite-differences", check_gradient_fd),
    ("dense-gauss-newton-equivalence", check_dense_gauss_newton),
    ("retraction-first-order", check_retraction_order),
    ("projection-idempotent-self-adjoint", check_projection),
    ("gauge-invariance", check_gauge_invariance),
    ("training-orthonormality", check_training_stiefel),
]


def run_selftest(checkpoint: str | None = None, out=print) -> int:
    """Run all properties, print one PASS/FAIL line each; 0 iff all pass."""
    checks = list(PROPERTIES)
    if checkpoint is not None:
        checks.append(
            ("checkpoint-orthonormality", lambda: check_checkpoint(checkpoint))
        )
    failures = 0
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as err:  # a crashed property is a failed property
            ok, detail = False, f"{type(err).__name__}: {err}"
        failures += 0 if ok else 1
        out(f"{'PASS' if ok else 'FAIL'} {name:36s} {detail}")
    if failures:
        out(f"{failures} of {len(checks)} properties failed")
        return 2
    out(f"all {len(checks)} properties passed")
    return 0
