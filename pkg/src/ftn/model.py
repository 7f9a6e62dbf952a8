"""Tree tensor network model: parameters, evaluation, and derivative sweeps.

A model over ``d`` input modes is a balanced binary tree of third-order cores
``A_k`` of shape (left bond, right bond, own bond), one per internal node of
the topology.  The represented coefficient tensor is never formed; evaluation
contracts per-sample rank-one feature tensors bottom-up through the tree:

    W_leaf  = feature matrix of that mode                     (m, n_nu)
    W_node  = mttkrp(A_node, W_left, W_right)                 (m, r_node)

and the root message is the batch of model outputs (m, n_0).

The derivative of the (multilinear) parametrization is available in both
directions: :func:`forward_jvp` pushes a tangent tuple forward to output
space, :func:`backprop` pulls a batch of output cotangents back to a tangent
tuple via a second, top-down sweep.  Both reuse the bottom-up messages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .features import FeatureBatch, FeatureFamily, eval_features
from .kernels import mttkrp, thin_qr
from .sampling import standard_normal
from .topology import TreeTopology, build_balanced

__all__ = [
    "TtnParams",
    "TangentTuple",
    "HorizontalTangent",
    "forward",
    "bottom_up_messages",
    "backprop",
    "forward_jvp",
    "change_of_basis",
    "random_init",
    "zero_tangent",
    "unfold_core",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TtnParams:
    """Immutable parameter tuple: one core per internal node, in node order.

    ``cores[i]`` belongs to internal node ``topology.d + i``; the last core is
    the root.  Treat the arrays as read-only; operations return new instances.
    """

    topology: TreeTopology
    cores: tuple[np.ndarray, ...]

    def __post_init__(self):
        expected = len(self.topology.internal_ids)
        if len(self.cores) != expected:
            raise ValueError(f"expected {expected} cores, got {len(self.cores)}")
        for i, node in enumerate(self.topology.internal_ids):
            shape = self.topology.core_shape(node)
            if self.cores[i].shape != shape:
                raise ValueError(
                    f"core {i} (node {self.topology.interval_label(node)}) has "
                    f"shape {self.cores[i].shape}, expected {shape}"
                )

    def core(self, node: int) -> np.ndarray:
        return self.cores[node - self.topology.d]

    def stiefel_defect(self) -> float:
        """Max-norm deviation of non-root core unfoldings from orthonormality."""
        worst = 0.0
        for i, node in enumerate(self.topology.internal_ids):
            if node == self.topology.root:
                continue
            a = _unfold(self.cores[i])
            worst = max(worst, np.abs(a.T @ a - np.eye(a.shape[1])).max())
        return worst


class TangentTuple:
    """A direction in parameter space: one array per core, same shapes."""

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in blocks]

    def copy(self) -> "TangentTuple":
        return TangentTuple([b.copy() for b in self.blocks])


class HorizontalTangent(TangentTuple):
    """A tangent tuple certified horizontal at a base point.

    Produced by the geometry module; carries its base so operator code can
    reject tangents from a stale iterate.
    """

    __slots__ = ("base",)

    def __init__(self, blocks, base: TtnParams):
        super().__init__(blocks)
        self.base = base

    def copy(self) -> "HorizontalTangent":
        return HorizontalTangent([b.copy() for b in self.blocks], self.base)


def zero_tangent(params: TtnParams) -> TangentTuple:
    return TangentTuple([np.zeros_like(c) for c in params.cores])


def unfold_core(core: np.ndarray) -> np.ndarray:
    """Row-major (rL * rR, r) matricization of a core."""
    return core.reshape(core.shape[0] * core.shape[1], core.shape[2])


_unfold = unfold_core


def _check_batch(params: TtnParams, batch: FeatureBatch) -> None:
    topo = params.topology
    if batch.num_modes != topo.d:
        raise ValueError(f"batch has {batch.num_modes} modes, model has {topo.d}")
    for nu in range(topo.d):
        if batch.modes[nu].shape[1] != topo.leaf_dims[nu]:
            raise ValueError(
                f"mode {nu} has feature dimension {batch.modes[nu].shape[1]}, "
                f"expected {topo.leaf_dims[nu]}"
            )


def _check_tangent(params: TtnParams, tangent: TangentTuple) -> None:
    if len(tangent.blocks) != len(params.cores):
        raise ValueError("tangent has wrong number of blocks")
    for b, c in zip(tangent.blocks, params.cores):
        if b.shape != c.shape:
            raise ValueError(f"tangent block shape {b.shape} != core shape {c.shape}")


def bottom_up_messages(params: TtnParams, batch: FeatureBatch) -> list[np.ndarray]:
    """Per-node contraction messages; entry ``node`` has shape (m, r_node).

    Leaf entries alias the batch's feature matrices; the root entry is the
    batch of model outputs.
    """
    _check_batch(params, batch)
    topo = params.topology
    msgs: list[np.ndarray] = [None] * topo.num_nodes
    for nu in range(topo.d):
        msgs[nu] = batch.modes[nu]
    for node in topo.internal_ids:
        left, right = topo.children[node]
        msgs[node] = mttkrp(params.core(node), msgs[left], msgs[right])
    return msgs


def forward(params: TtnParams, batch: FeatureBatch) -> np.ndarray:
    """Model outputs, shape (m, n_0); row i is the prediction for sample i."""
    return bottom_up_messages(params, batch)[params.topology.root]


def _top_down_messages(
    params: TtnParams,
    msgs: list[np.ndarray],
    cotangents: np.ndarray,
) -> list[np.ndarray]:
    """Cotangent messages per internal node, shape (m, J, r_node).

    ``cotangents`` has shape (m, J, n_0): J output cotangent vectors per
    sample, all propagated in one sweep.  Entry ``node`` is the contraction
    of everything between the root cotangents and node's own bond.
    """
    topo = params.topology
    down: list[np.ndarray] = [None] * topo.num_nodes
    down[topo.root] = cotangents
    for node in reversed(topo.internal_ids):
        core = params.core(node)
        left, right = topo.children[node]
        u = down[node]
        if not topo.is_leaf(left):
            down[left] = np.einsum(
                "abc,ib,ijc->ija", core, msgs[right], u, optimize=True
            )
        if not topo.is_leaf(right):
            down[right] = np.einsum(
                "abc,ia,ijc->ijb", core, msgs[left], u, optimize=True
            )
    return down


def backprop(
    params: TtnParams,
    batch: FeatureBatch,
    cotangents: np.ndarray,
    weight: float = 1.0,
    messages: list[np.ndarray] | None = None,
) -> TangentTuple:
    """Adjoint of :func:`forward_jvp`: pull output cotangents back to cores.

    Block k of the result is ``weight * sum_i d<f(x_i), v_i>/dA_k`` for
    cotangent rows ``v_i``.  Cost is one bottom-up and one top-down sweep,
    linear in the number of nodes.
    """
    cotangents = np.asarray(cotangents, dtype=np.float64)
    if messages is None:
        messages = bottom_up_messages(params, batch)
    topo = params.topology
    if cotangents.shape != (batch.num_samples, topo.output_dim):
        raise ValueError(
            f"cotangents shape {cotangents.shape} != "
            f"{(batch.num_samples, topo.output_dim)}"
        )
    down = _top_down_messages(params, messages, cotangents[:, None, :])
    blocks = []
    for node in topo.internal_ids:
        left, right = topo.children[node]
        blocks.append(
            weight
            * np.einsum(
                "ia,ib,ic->abc",
                messages[left],
                messages[right],
                down[node][:, 0, :],
                optimize=True,
            )
        )
    return TangentTuple(blocks)


def forward_jvp(
    params: TtnParams,
    batch: FeatureBatch,
    direction: TangentTuple,
    messages: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Directional derivative of the outputs in a parameter direction.

    Equals the Leibniz sum of forward passes with one core at a time replaced
    by its perturbation, evaluated here in a single tangent sweep.  Linear in
    ``direction``; shape (m, n_0).
    """
    _check_tangent(params, direction)
    if messages is None:
        messages = bottom_up_messages(params, batch)
    topo = params.topology
    dot: list[np.ndarray] = [None] * topo.num_nodes
    for node in topo.internal_ids:
        left, right = topo.children[node]
        acc = mttkrp(direction.blocks[node - topo.d], messages[left], messages[right])
        if not topo.is_leaf(left):
            acc += mttkrp(params.core(node), dot[left], messages[right])
        if not topo.is_leaf(right):
            acc += mttkrp(params.core(node), messages[left], dot[right])
        dot[node] = acc
    return dot[topo.root]


def change_of_basis(params: TtnParams, transforms) -> TtnParams:
    """Re-express the model under new per-mode feature maps.

    Given invertible matrices ``M_nu`` and new features
    ``psi_nu = M_nu^{-1} phi_nu``, returns parameters representing the same
    function under the new features: outputs satisfy
    ``forward(new, psi) == forward(old, phi)``.  The transforms are absorbed
    into the leaf-adjacent cores and the tree is re-orthonormalized by a
    bottom-up QR sweep that pushes triangular factors into parents.
    """
    topo = params.topology
    transforms = [np.asarray(m, dtype=np.float64) for m in transforms]
    if len(transforms) != topo.d:
        raise ValueError(f"expected {topo.d} transforms, got {len(transforms)}")
    for nu, m in enumerate(transforms):
        n = topo.leaf_dims[nu]
        if m.shape != (n, n):
            raise ValueError(f"transform {nu} has shape {m.shape}, expected {(n, n)}")
        if np.linalg.matrix_rank(m) < n:
            raise ValueError(f"transform for mode {nu} is singular")

    cores = [c.copy() for c in params.cores]

    def absorb(parent: int, side: int, mat: np.ndarray) -> None:
        ci = parent - topo.d
        if side == 0:
            cores[ci] = np.einsum("aA,Abc->abc", mat, cores[ci], optimize=True)
        else:
            cores[ci] = np.einsum("bB,aBc->abc", mat, cores[ci], optimize=True)

    # M_nu^T enters the leaf-adjacent index of each leaf's parent core.
    for nu in range(topo.d):
        parent, side = topo.parent_of(nu)
        absorb(parent, side, transforms[nu].T)

    # Restore orthonormality bottom-up, pushing R factors into parents.
    for node in topo.internal_ids:
        if node == topo.root:
            break
        ci = node - topo.d
        q, r = thin_qr(_unfold(cores[ci]))
        if np.diag(r).min() <= 1e-12 * max(np.diag(r).max(), 1.0):
            raise ValueError(
                f"rank collapse at node {topo.interval_label(node)} during "
                "change of basis"
            )
        cores[ci] = q.reshape(cores[ci].shape)
        parent, side = topo.parent_of(node)
        absorb(parent, side, r)

    return TtnParams(topo, tuple(cores))


def _default_probe(topology: TreeTopology, rng: np.random.Generator) -> FeatureBatch:
    """64 uniform samples on [-1, 1] under per-mode monomial features."""
    samples = 2.0 * rng.random((64, topology.d)) - 1.0
    modes = []
    for nu, n in enumerate(topology.leaf_dims):
        fam = FeatureFamily("monomial", degree=n - 1)
        modes.append(eval_features(fam, samples[:, nu : nu + 1]).modes[0])
    return FeatureBatch(tuple(modes))


def random_init(
    topology: TreeTopology,
    seed: int,
    probe: FeatureBatch | None = None,
    scale: float = 1.0,
) -> TtnParams:
    """Random starting point on the manifold.

    Non-root cores get independent standard normal entries and are then
    orthonormalized with :func:`thin_qr`; the root core is scaled so the
    outputs on a probe batch have root-mean-square ``scale``.  Callers that
    know their input domain and feature family should pass a matching
    64-sample probe; the default probe uses uniform [-1, 1] inputs under
    monomial features.  Deterministic in the seed.
    """
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    cores = []
    for node in topology.internal_ids:
        shape = topology.core_shape(node)
        block = standard_normal(rng, (shape[0] * shape[1], shape[2]))
        if node != topology.root:
            block, _ = thin_qr(block)
        cores.append(block.reshape(shape))
    params = TtnParams(topology, tuple(cores))
    if probe is None:
        probe = _default_probe(topology, rng)
    outputs = forward(params, probe)
    rms = np.sqrt(np.mean(outputs * outputs))
    if rms > 0.0:
        cores[-1] = cores[-1] * (scale / rms)
    return TtnParams(topology, tuple(cores))


_MAGIC = b"FTNC"
_VERSION = 1


def save_checkpoint(params: TtnParams, path) -> None:
    """Write parameters to a binary checkpoint.

    Layout: magic ``FTNC``, version u32, then the topology descriptor (mode
    count, output dimension, leaf dimensions, internal bond dimensions in
    node order) as little-endian u32, then the cores in node order as
    little-endian float64, row-major.
    """
    topo = params.topology
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<II", topo.d, topo.output_dim))
        fh.write(struct.pack(f"<{topo.d}I", *topo.leaf_dims))
        internal_bonds = [topo.bond_dims[n] for n in topo.internal_ids]
        fh.write(struct.pack("<I", len(internal_bonds)))
        fh.write(struct.pack(f"<{len(internal_bonds)}I", *internal_bonds))
        for core in params.cores:
            fh.write(np.ascontiguousarray(core, dtype="<f8").tobytes())


def load_checkpoint(path) -> TtnParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset: int, size: int) -> bytes:
        if offset + size > len(blob):
            raise ValueError("truncated checkpoint")
        return blob[offset : offset + size]

    if take(0, 4) != _MAGIC:
        raise ValueError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4, 4))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    d, n0 = struct.unpack("<II", take(8, 8))
    pos = 16
    leaf_dims = struct.unpack(f"<{d}I", take(pos, 4 * d))
    pos += 4 * d
    (n_internal,) = struct.unpack("<I", take(pos, 4))
    pos += 4
    bonds = struct.unpack(f"<{n_internal}I", take(pos, 4 * n_internal))
    pos += 4 * n_internal
    if n_internal != d - 1:
        raise ValueError("inconsistent internal node count")

    non_root = {}
    topo_probe = build_balanced(leaf_dims, n0, 1, validate=False)
    for i, node in enumerate(topo_probe.internal_ids):
        if node != topo_probe.root:
            non_root[topo_probe.intervals[node]] = bonds[i]
        elif bonds[i] != n0:
            raise ValueError("root bond does not match output dimension")
    topo = build_balanced(leaf_dims, n0, non_root)

    cores = []
    for node in topo.internal_ids:
        shape = topo.core_shape(node)
        size = 8 * shape[0] * shape[1] * shape[2]
        arr = np.frombuffer(take(pos, size), dtype="<f8").reshape(shape)
        cores.append(arr.astype(np.float64))
        pos += size
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return TtnParams(topo, tuple(cores))
