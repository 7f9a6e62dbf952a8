"""Balanced binary tree topologies for tree tensor networks.

A topology over ``d`` input modes (``d`` a power of two) has ``d`` leaves and
``d - 1`` internal nodes.  Nodes are stored in one flat list: ids ``0..d-1``
are the leaves in mode order, ids ``d..2d-2`` are the internal nodes level by
level from the bottom, so children always precede parents and the last id is
the root.  Every node carries a bond dimension: ``n_nu`` at leaf ``nu``, the
requested rank at internal non-root nodes, and the output dimension at the
root.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["TreeTopology", "build_balanced", "clamp_bond_dims"]


@dataclass(frozen=True)
class TreeTopology:
    leaf_dims: tuple[int, ...]
    output_dim: int
    intervals: tuple[tuple[int, int], ...]
    children: tuple[tuple[int, int] | None, ...]
    bond_dims: tuple[int, ...]
    parents: tuple[tuple[int, int] | None, ...]

    @property
    def d(self) -> int:
        return len(self.leaf_dims)

    @property
    def num_nodes(self) -> int:
        return len(self.intervals)

    @property
    def root(self) -> int:
        return self.num_nodes - 1

    @property
    def internal_ids(self) -> range:
        """Internal node ids in bottom-up order; the last one is the root."""
        return range(self.d, self.num_nodes)

    def is_leaf(self, node: int) -> bool:
        return node < self.d

    def core_shape(self, node: int) -> tuple[int, int, int]:
        """(left bond, right bond, own bond) of an internal node's core."""
        kids = self.children[node]
        if kids is None:
            raise ValueError(f"node {node} is a leaf and has no core")
        return (
            self.bond_dims[kids[0]],
            self.bond_dims[kids[1]],
            self.bond_dims[node],
        )

    def parent_of(self, node: int) -> tuple[int, int] | None:
        """(parent id, side) with side 0 for left child, 1 for right.

        Returns None for the root.
        """
        return self.parents[node]

    def interval_label(self, node: int) -> str:
        lo, hi = self.intervals[node]
        return f"{lo}-{hi}"

    def validate(self) -> None:
        """Check the rank bound r_t <= r_tL * r_tR at internal non-root nodes."""
        for node in self.internal_ids:
            if node == self.root:
                continue
            left, right = self.children[node]
            cap = self.bond_dims[left] * self.bond_dims[right]
            if self.bond_dims[node] > cap:
                raise ValueError(
                    f"bond dimension {self.bond_dims[node]} at node "
                    f"{self.interval_label(node)} exceeds the rank bound {cap}"
                )


def build_balanced(leaf_dims, output_dim: int, bond_dims, validate: bool = True) -> TreeTopology:
    """Build the balanced binary topology over the given leaf dimensions.

    Parameters
    ----------
    leaf_dims : sequence of int
        Feature dimension per input mode; the length d must be a power of two.
    output_dim : int
        Dimension of the model output (the root bond).
    bond_dims : int or mapping
        Rank request for internal non-root nodes: a single int applied
        everywhere, or a mapping keyed by 1-based leaf intervals ``(lo, hi)``.
    validate : bool
        When True (default), reject requests violating the rank bound
        r_t <= r_tL * r_tR.  ``clamp_bond_dims`` accepts the unvalidated form.
    """
    leaf_dims = tuple(int(n) for n in leaf_dims)
    d = len(leaf_dims)
    if d < 2 or d & (d - 1) != 0:
        raise ValueError(f"number of modes must be a power of two >= 2, got {d}")
    if any(n < 1 for n in leaf_dims):
        raise ValueError("leaf dimensions must be positive")
    if output_dim < 1:
        raise ValueError("output dimension must be positive")

    intervals = [(nu + 1, nu + 1) for nu in range(d)]
    children: list[tuple[int, int] | None] = [None] * d
    bonds = list(leaf_dims)

    def requested(lo: int, hi: int) -> int:
        if isinstance(bond_dims, int):
            return bond_dims
        try:
            return int(bond_dims[(lo, hi)])
        except KeyError:
            raise ValueError(f"no bond dimension given for node {lo}-{hi}") from None

    prev_level = list(range(d))
    while len(prev_level) > 1:
        level = []
        for i in range(0, len(prev_level), 2):
            left, right = prev_level[i], prev_level[i + 1]
            lo, hi = intervals[left][0], intervals[right][1]
            node = len(intervals)
            intervals.append((lo, hi))
            children.append((left, right))
            is_root = len(prev_level) == 2
            r = output_dim if is_root else requested(lo, hi)
            if r < 1:
                raise ValueError(f"bond dimension at node {lo}-{hi} must be positive")
            bonds.append(r)
            level.append(node)
        prev_level = level

    parents: list[tuple[int, int] | None] = [None] * len(intervals)
    for node, kids in enumerate(children):
        if kids is not None:
            parents[kids[0]] = (node, 0)
            parents[kids[1]] = (node, 1)

    topo = TreeTopology(
        leaf_dims=leaf_dims,
        output_dim=int(output_dim),
        intervals=tuple(intervals),
        children=tuple(children),
        bond_dims=tuple(bonds),
        parents=tuple(parents),
    )
    if validate:
        topo.validate()
    return topo


def clamp_bond_dims(topology: TreeTopology) -> TreeTopology:
    """Clamp requested bond dimensions to feasible values, bottom up.

    Each internal non-root bond is reduced to
    ``min(r_t, r_tL * r_tR)`` with the children already clamped, which also
    enforces the product-of-descendant-leaf-dims bound.  Idempotent on
    feasible topologies; the root bond (the output dimension) is untouched.
    """
    bonds = list(topology.bond_dims)
    for node in topology.internal_ids:
        if node == topology.root:
            continue
        left, right = topology.children[node]
        bonds[node] = min(bonds[node], bonds[left] * bonds[right])
    return TreeTopology(
        leaf_dims=topology.leaf_dims,
        output_dim=topology.output_dim,
        intervals=topology.intervals,
        children=topology.children,
        bond_dims=tuple(bonds),
        parents=topology.parents,
    )
