"""Tree network forward/backward, reparametrization, and checkpoints.

The forward pass is checked against a dense contraction of the full
coefficient tensor; backprop is checked through the adjoint identity with
forward_jvp, and forward_jvp against finite differences.
"""

import numpy as np
import pytest

from ftn.features import FeatureBatch, FeatureFamily, eval_features
from ftn.reference import dense_forward
from ftn.model import (
    HorizontalTangent,
    TangentTuple,
    TtnParams,
    backprop,
    change_of_basis,
    forward,
    forward_jvp,
    load_checkpoint,
    random_init,
    save_checkpoint,
    unfold_core,
    zero_tangent,
)
from ftn.topology import build_balanced


def _instance(seed=0, d=4, leaf_dim=3, bond=4, n0=2, m=9):
    topo = build_balanced([leaf_dim] * d, n0, bond)
    params = random_init(topo, seed=seed)
    rng = np.random.default_rng(seed + 100)
    samples = 2.0 * rng.random((m, d)) - 1.0
    batch = eval_features(FeatureFamily("monomial", degree=leaf_dim - 1), samples)
    return params, batch, rng


def _random_tangent(params, rng):
    return TangentTuple([rng.normal(size=c.shape) for c in params.cores])


def test_forward_two_modes_by_hand():
    topo = build_balanced([2, 3], output_dim=4, bond_dims=1)
    rng = np.random.default_rng(1)
    core = rng.normal(size=(2, 3, 4))
    params = TtnParams(topo, (core,))
    u = rng.normal(size=(5, 2))
    v = rng.normal(size=(5, 3))
    out = forward(params, FeatureBatch((u, v)))
    expected = np.einsum("ia,ib,abt->it", u, v, core)
    np.testing.assert_allclose(out, expected, atol=1e-13)


def test_forward_matches_dense_tensor():
    params, batch, _ = _instance()
    np.testing.assert_allclose(
        forward(params, batch), dense_forward(params, batch), atol=1e-12
    )


def test_unfold_is_row_major():
    core = np.arange(24.0).reshape(2, 3, 4)
    flat = unfold_core(core)
    assert flat.shape == (6, 4)
    for p in range(2):
        for q in range(3):
            np.testing.assert_array_equal(flat[p * 3 + q], core[p, q])


def test_backprop_adjoint_identity():
    params, batch, rng = _instance()
    cot = rng.normal(size=(batch.num_samples, 2))
    pullback = backprop(params, batch, cot)
    for _ in range(3):
        delta = _random_tangent(params, rng)
        lhs = sum(np.vdot(g, d) for g, d in zip(pullback.blocks, delta.blocks))
        rhs = np.vdot(forward_jvp(params, batch, delta), cot)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_backprop_weight_scales_linearly():
    params, batch, rng = _instance()
    cot = rng.normal(size=(batch.num_samples, 2))
    a = backprop(params, batch, cot, weight=2.5)
    b = backprop(params, batch, cot)
    for x, y in zip(a.blocks, b.blocks):
        np.testing.assert_allclose(x, 2.5 * y, atol=1e-13)


def test_forward_jvp_matches_finite_difference():
    params, batch, rng = _instance()
    delta = _random_tangent(params, rng)
    h = 1e-6
    plus = TtnParams(
        params.topology, tuple(c + h * b for c, b in zip(params.cores, delta.blocks))
    )
    minus = TtnParams(
        params.topology, tuple(c - h * b for c, b in zip(params.cores, delta.blocks))
    )
    fd = (forward(plus, batch) - forward(minus, batch)) / (2.0 * h)
    np.testing.assert_allclose(forward_jvp(params, batch, delta), fd, atol=1e-7)


def test_forward_jvp_zero_direction():
    params, batch, _ = _instance()
    out = forward_jvp(params, batch, zero_tangent(params))
    np.testing.assert_array_equal(out, np.zeros_like(out))


def test_input_validation():
    params, batch, rng = _instance()
    small = eval_features(FeatureFamily("monomial", degree=1), np.zeros((4, 4)))
    with pytest.raises(ValueError, match="feature dimension"):
        forward(params, small)
    wrong_modes = eval_features(FeatureFamily("monomial", degree=2), np.zeros((4, 2)))
    with pytest.raises(ValueError, match="modes"):
        forward(params, wrong_modes)
    with pytest.raises(ValueError, match="cotangents shape"):
        backprop(params, batch, np.zeros((batch.num_samples, 5)))
    bad = _random_tangent(params, rng)
    bad.blocks = bad.blocks[:-1]
    with pytest.raises(ValueError, match="number of blocks"):
        forward_jvp(params, batch, bad)
    with pytest.raises(ValueError, match="expected 3 cores"):
        TtnParams(params.topology, params.cores[:-1])
    squished = list(params.cores)
    squished[0] = squished[0][:, :, :1]
    with pytest.raises(ValueError, match="shape"):
        TtnParams(params.topology, tuple(squished))


def test_random_init_orthonormal_and_deterministic():
    topo = build_balanced([3] * 8, 2, 5)
    a = random_init(topo, seed=42)
    b = random_init(topo, seed=42)
    c = random_init(topo, seed=43)
    assert a.stiefel_defect() < 1e-13
    for x, y in zip(a.cores, b.cores):
        np.testing.assert_array_equal(x, y)
    assert any(np.any(x != y) for x, y in zip(a.cores, c.cores))


def test_random_init_probe_scaling():
    topo = build_balanced([2] * 4, 3, 2)
    samples = np.random.default_rng(0).random((64, 4))
    probe = eval_features(FeatureFamily("monomial", degree=1), samples)
    params = random_init(topo, seed=1, probe=probe, scale=0.25)
    rms = np.sqrt(np.mean(forward(params, probe) ** 2))
    np.testing.assert_allclose(rms, 0.25, rtol=1e-12)
    with pytest.raises(ValueError, match="positive"):
        random_init(topo, seed=1, scale=0.0)


def test_change_of_basis_preserves_function():
    params, batch, rng = _instance(seed=3)
    topo = params.topology
    transforms = [
        np.eye(3) + 0.3 * rng.normal(size=(3, 3)) for _ in range(topo.d)
    ]
    new = change_of_basis(params, transforms)
    assert new.stiefel_defect() < 1e-12
    # psi_nu = M_nu^{-1} phi_nu mode by mode.
    new_modes = tuple(
        np.linalg.solve(transforms[nu], batch.modes[nu].T).T for nu in range(topo.d)
    )
    np.testing.assert_allclose(
        forward(new, FeatureBatch(new_modes)), forward(params, batch), atol=1e-10
    )


def test_change_of_basis_identity_is_noop_in_function():
    params, batch, _ = _instance(seed=4)
    new = change_of_basis(params, [np.eye(3)] * 4)
    np.testing.assert_allclose(forward(new, batch), forward(params, batch), atol=1e-12)


def test_change_of_basis_rejects_bad_transforms():
    params, _, _ = _instance()
    with pytest.raises(ValueError, match="singular"):
        change_of_basis(params, [np.eye(3)] * 3 + [np.zeros((3, 3))])
    with pytest.raises(ValueError, match="expected 4 transforms"):
        change_of_basis(params, [np.eye(3)] * 3)
    with pytest.raises(ValueError, match="shape"):
        change_of_basis(params, [np.eye(2)] * 4)


def test_checkpoint_roundtrip(tmp_path):
    topo = build_balanced([2, 3, 4, 5], 6, {(1, 2): 4, (3, 4): 7})
    params = random_init(topo, seed=9)
    path = tmp_path / "model.ftnc"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.topology == topo
    for a, b in zip(loaded.cores, params.cores):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_corruption_errors(tmp_path):
    params = random_init(build_balanced([2] * 4, 2, 3), seed=0)
    path = tmp_path / "model.ftnc"
    save_checkpoint(params, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ftnc"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:40])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(blob + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:4] + b"\x07\0\0\0" + blob[8:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)


def test_tangent_tuple_copy_and_horizontal_base():
    params, _, rng = _instance()
    t = _random_tangent(params, rng)
    c = t.copy()
    c.blocks[0][0, 0, 0] += 1.0
    assert t.blocks[0][0, 0, 0] != c.blocks[0][0, 0, 0]
    h = HorizontalTangent([b.copy() for b in t.blocks], params)
    assert h.copy().base is params
