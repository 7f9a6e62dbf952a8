"""Datasets: synthetic recovery data, IDX and CSV loaders, resampling, splits.

A :class:`Dataset` carries raw inputs (one row per sample) and targets that
are either regression values or exact one-hot label rows.  Feature-map
evaluation happens downstream; loaders only parse, scale to [0, 1], and
encode labels.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

from .features import FeatureFamily, eval_features
from .model import TtnParams, forward, random_init
from .sampling import standard_normal
from .topology import build_balanced

__all__ = [
    "Dataset",
    "one_hot",
    "gen_recovery",
    "load_idx",
    "write_idx",
    "load_csv",
    "downscale",
    "morton_order",
    "split",
]

IDX_IMAGES_MAGIC = 0x00000803  # u8 entries, 3 dimensions
IDX_LABELS_MAGIC = 0x00000801  # u8 entries, 1 dimension


@dataclass(frozen=True)
class Dataset:
    """Sample matrix plus targets and a little metadata.

    ``targets`` has one row per input row: regression values for
    ``num_classes == 0``, otherwise exact one-hot label encodings.
    """

    inputs: np.ndarray  # (m, d)
    targets: np.ndarray  # (m, n_0)
    name: str = ""
    num_classes: int = 0
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be matrices")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree in sample count")
        if self.num_classes:
            if self.targets.shape[1] != self.num_classes:
                raise ValueError("target width does not match the class count")
            ones = self.targets == 1.0
            if not (
                np.all((self.targets == 0.0) | ones)
                and np.all(ones.sum(axis=1) == 1)
            ):
                raise ValueError("classification targets must be one-hot rows")

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_features(self) -> int:
        return self.inputs.shape[1]

    def take(self, indices) -> "Dataset":
        return replace(self, inputs=self.inputs[indices], targets=self.targets[indices])

    def labels(self) -> np.ndarray:
        if not self.num_classes:
            raise ValueError("regression dataset has no labels")
        return np.argmax(self.targets, axis=1)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label out of range [0, {num_classes}): {int(labels.min())}..{int(labels.max())}"
        )
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels.astype(np.intp)] = 1.0
    return out


def gen_recovery(
    seed: int,
    m: int = 256,
    d: int = 4,
    leaf_dim: int = 3,
    bond_dim: int = 5,
    output_dim: int = 3,
    noise_var: float = 2.5e-3,
) -> tuple[Dataset, TtnParams]:
    """Noisy samples of a random tree tensor network in the monomial basis.

    Inputs are uniform on [-1, 1]^d; targets are the ground-truth model's
    outputs plus independent centered Gaussian noise of variance ``noise_var``
    per component.  Returns the dataset and the ground-truth parameters (the
    latter for diagnostics such as exact-recovery checks).  Fixed seeds give
    bitwise-identical datasets.
    """
    if noise_var < 0.0:
        raise ValueError("noise_var must be nonnegative")
    rng = np.random.default_rng(seed)
    topology = build_balanced([leaf_dim] * d, output_dim, bond_dim)
    truth = random_init(topology, seed=int(rng.integers(2**31)))
    inputs = 2.0 * rng.random((m, d)) - 1.0
    family = FeatureFamily("monomial", degree=leaf_dim - 1)
    targets = forward(truth, eval_features(family, inputs))
    if noise_var > 0.0:
        targets = targets + np.sqrt(noise_var) * standard_normal(
            rng, (m, output_dim)
        )
    dataset = Dataset(inputs, targets, name="recovery", value_range=(-1.0, 1.0))
    return dataset, truth


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Image/label file pair in the big-endian IDX format.

    Pixels are scaled to [0, 1] (255 -> 1.0) and flattened row-major; labels
    are one-hot encoded.
    """
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(
        flat,
        one_hot(labels, num_classes),
        name="idx",
        num_classes=num_classes,
        value_range=(0.0, 1.0),
    )


def _parse_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise ValueError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic != expected_magic:
            raise ValueError(
                f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        raw_dims = fh.read(4 * ndim)
        if len(raw_dims) < 4 * ndim:
            raise ValueError(f"{path}: truncated IDX dimension list")
        dims = struct.unpack(f">{ndim}I", raw_dims)
        count = int(np.prod(dims))
        payload = fh.read(count + 1)
        if len(payload) < count:
            raise ValueError(
                f"{path}: truncated IDX payload ({len(payload)} of {count} bytes)"
            )
        if len(payload) > count:
            raise ValueError(f"{path}: trailing bytes after IDX payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_idx` for u8 images (m, H, W) and labels (m,)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError("expected images (m, H, W) and labels (m,)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_csv(
    path: str,
    label_column: int = -1,
    feature_max: float = 16.0,
    num_classes: int = 10,
) -> Dataset:
    """Numeric CSV with one sample per row and an integer label column.

    A leading header row is skipped when any of its cells is non-numeric.
    Features are scaled to [0, 1] by ``feature_max``.
    """
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, cells in enumerate(reader, start=1):
            if not cells:
                continue
            try:
                values = [float(c) for c in cells]
            except ValueError:
                if lineno == 1:  # header
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric cell") from None
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    for lineno, values in enumerate(rows, start=1):
        if len(values) != width:
            raise ValueError(
                f"{path}: ragged row with {len(values)} cells, expected {width}"
            )
    table = np.asarray(rows)
    labels = table[:, label_column].astype(np.intp)
    if not np.allclose(table[:, label_column], labels):
        raise ValueError(f"{path}: non-integer labels")
    features = np.delete(table, label_column % width, axis=1) / feature_max
    return Dataset(
        features,
        one_hot(labels, num_classes),
        name="csv",
        num_classes=num_classes,
        value_range=(0.0, 1.0),
    )


def _overlap_weights(source: int, target: int) -> np.ndarray:
    """(target, source) row-stochastic fractional-overlap averaging weights."""
    scale = source / target
    weights = np.zeros((target, source))
    for t in range(target):
        lo, hi = t * scale, (t + 1) * scale
        for s in range(int(np.floor(lo)), min(int(np.ceil(hi)), source)):
            weights[t, s] = min(hi, s + 1) - max(lo, s)
    return weights / scale


def downscale(images: np.ndarray, height: int, width: int, target: int) -> np.ndarray:
    """Area-weighted resampling of flattened images to ``target x target``.

    Each output pixel averages the source region it covers, with fractional
    pixels weighted by overlap; the global mean is preserved exactly.
    """
    if target > height or target > width:
        raise ValueError("cannot upscale: target exceeds the source size")
    if images.ndim != 2 or images.shape[1] != height * width:
        raise ValueError(f"expected flattened images of {height}x{width} pixels")
    rows = _overlap_weights(height, target)
    cols = _overlap_weights(width, target)
    grids = images.reshape(-1, height, width)
    out = np.einsum("th,mhw,uw->mtu", rows, grids, cols, optimize=True)
    return out.reshape(images.shape[0], target * target)


def morton_order(side: int) -> np.ndarray:
    """Z-order permutation of a ``side x side`` pixel grid.

    ``perm[k]`` is the row-major index of the pixel with Morton code ``k``
    (interleaved row/column bits).  Applying it as a column permutation makes
    consecutive runs of features correspond to square image blocks, so a
    balanced pairing hierarchy merges 2x2 neighborhoods instead of scanline
    runs.  ``side`` must be a power of two.
    """
    if side < 1 or side & (side - 1):
        raise ValueError(f"side {side} is not a power of two")
    bits = side.bit_length() - 1
    perm = np.empty(side * side, dtype=np.intp)
    for code in range(side * side):
        row = col = 0
        for b in range(bits):
            col |= ((code >> (2 * b)) & 1) << b
            row |= ((code >> (2 * b + 1)) & 1) << b
        perm[code] = row * side + col
    return perm


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``floor(fraction * m)`` rows train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(dataset.num_samples)
    cut = int(train_fraction * dataset.num_samples)
    return dataset.take(order[:cut]), dataset.take(order[cut:])
