"""Shared fixtures: datasets written once per session.

The handwriting-image fixture synthesizes a deterministic 28x28 corpus from
the 8x8 sklearn digits: each sample is a bilinearly upscaled template with a
random sub-image shift and pixel noise.  Train and test draw from disjoint
template pools, so memorizing training images does not solve the test set.
"""

import numpy as np
import pytest
from sklearn.datasets import load_digits

from ftn.data import write_idx

TRAIN_SAMPLES = 10_000
TEST_SAMPLES = 2_000


@pytest.fixture(scope="session")
def digits_csv(tmp_path_factory):
    digits = load_digits()
    path = tmp_path_factory.mktemp("digits") / "digits.csv"
    table = np.column_stack([digits.data, digits.target])
    header = ",".join([f"p{i}" for i in range(64)] + ["label"])
    np.savetxt(path, table, fmt="%d", delimiter=",", header=header, comments="")
    return str(path)


def _upscale(img: np.ndarray, size: int = 28) -> np.ndarray:
    """Bilinear resample of a square image onto a size x size grid."""
    n = img.shape[0]
    pos = np.linspace(0.0, n - 1.0, size)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    rows = img[lo] * (1.0 - frac)[:, None] + img[hi] * frac[:, None]
    return rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]


def _render_samples(templates, labels, count, rng):
    images = np.empty((count, 28, 28), dtype=np.uint8)
    out_labels = np.empty(count, dtype=np.uint8)
    pick = rng.integers(0, len(templates), size=count)
    shifts = rng.integers(-2, 3, size=(count, 2))
    noise = rng.normal(0.0, 0.08, size=(count, 28, 28))
    for i in range(count):
        canvas = _upscale(templates[pick[i]])
        canvas = np.roll(canvas, (shifts[i, 0], shifts[i, 1]), axis=(0, 1))
        canvas = np.clip(canvas + noise[i], 0.0, 1.0)
        images[i] = np.round(canvas * 255.0).astype(np.uint8)
        out_labels[i] = labels[pick[i]]
    return images, out_labels


@pytest.fixture(scope="session")
def handwriting_idx(tmp_path_factory):
    """Paths of a 28x28 IDX image corpus: 10k train, 2k test."""
    digits = load_digits()
    templates = digits.images / 16.0
    rng = np.random.default_rng(20260814)
    base = tmp_path_factory.mktemp("handwriting")
    paths = {}
    for name, count, parity in (("train", TRAIN_SAMPLES, 0), ("test", TEST_SAMPLES, 1)):
        pool = np.arange(len(templates)) % 2 == parity
        images, labels = _render_samples(
            templates[pool], digits.target[pool], count, rng
        )
        img_path = str(base / f"{name}-images.idx")
        lab_path = str(base / f"{name}-labels.idx")
        write_idx(img_path, lab_path, images, labels)
        paths[f"{name}_images"] = img_path
        paths[f"{name}_labels"] = lab_path
    return paths
