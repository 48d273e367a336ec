"""IDX dataset ingestion, train/test splitting, and pair sampling.

Pixels are byte values mapped to [0, 1] by b/255, so the PSNR peak is
exactly 1. Splitting and pair sampling are pure functions of their seed.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    BadMagicError,
    DimMismatchError,
    EmptyClassError,
    EmptyDatasetError,
    ShapeMismatchError,
    TruncatedFileError,
)

IMAGE_MAGIC = 2051  # 0x00000803: ubyte payload, 3 dims
LABEL_MAGIC = 2049  # 0x00000801: ubyte payload, 1 dim

IMAGES_FILENAME = "images-idx3-ubyte"
LABELS_FILENAME = "labels-idx1-ubyte"

PAIRING_MODES = ("same-class", "unconditional")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int
    split: str  # "train" | "test"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ShapeMismatchError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)


@dataclass
class ImagePair:
    fixed: np.ndarray  # (H, W)
    moving: np.ndarray  # (H, W)
    fixed_index: int
    moving_index: int
    pairing_mode: str


def _read_header(blob, path, expect_dims):
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: shorter than the 4-byte magic")
    zero, dtype_code, ndims = blob[0] << 8 | blob[1], blob[2], blob[3]
    if zero != 0 or dtype_code != 0x08:
        raise BadMagicError(
            f"{path}: leading bytes {blob[:4].hex()} are not an unsigned-byte IDX magic"
        )
    if ndims != expect_dims:
        raise DimMismatchError(f"{path}: {ndims} dims declared, expected {expect_dims}")
    header_len = 4 + 4 * ndims
    if len(blob) < header_len:
        raise TruncatedFileError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndims}I", blob[4:header_len])
    return dims, blob[header_len:]


def load_idx_images(path):
    """Read an IDX image file into a (N, H, W) float array in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    (count, height, width), payload = _read_header(blob, path, expect_dims=3)
    expected = count * height * width
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    if height < 2 or width < 2:
        raise ShapeMismatchError(f"{path}: images of {height}x{width} are too small")
    raw = np.frombuffer(payload[:expected], dtype=np.uint8)
    return (raw.reshape(count, height, width).astype(np.float32)) / np.float32(255.0)


def load_idx_labels(path):
    with open(path, "rb") as f:
        blob = f.read()
    (count,), payload = _read_header(blob, path, expect_dims=1)
    if len(payload) < count:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header promises {count}"
        )
    return np.frombuffer(payload[:count], dtype=np.uint8).astype(np.int64)


def save_idx_images(path, images):
    """Write [0, 1] images back to IDX bytes (inverse of load_idx_images)."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ShapeMismatchError(f"expected (N, H, W) images, got {images.shape}")
    quantized = np.rint(images * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(quantized.tobytes())


def save_idx_labels(path, labels):
    labels = np.asarray(labels)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def load_dataset_dir(data_dir):
    """Load the canonical images/labels pair from a directory."""
    images = load_idx_images(os.path.join(data_dir, IMAGES_FILENAME))
    labels = load_idx_labels(os.path.join(data_dir, LABELS_FILENAME))
    if len(images) != len(labels):
        raise ShapeMismatchError(
            f"{data_dir}: {len(images)} images but {len(labels)} labels"
        )
    return images, labels


def split_train_test(images, labels, seed, train_fraction=0.8):
    """Seeded shuffle, then first 80% of the order is train, rest is test."""
    n = len(images)
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(n * train_fraction)
    train_idx, test_idx = perm[:cut], perm[cut:]
    return (
        LabeledDataset(images[train_idx], labels[train_idx], "train"),
        LabeledDataset(images[test_idx], labels[test_idx], "test"),
    )


def sample_pairs(dataset, count, mode="same-class", seed=0):
    """Draw ``count`` fixed/moving pairs of distinct records.

    Same-class mode registers a digit to another instance of its own
    class; unconditional mode pairs any two distinct records.
    """
    if mode not in PAIRING_MODES:
        raise ValueError(f"unknown pairing mode {mode!r}; use one of {PAIRING_MODES}")
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("cannot sample pairs from an empty dataset")
    if n < 2:
        raise EmptyDatasetError("need at least two records to form a distinct pair")
    rng = np.random.default_rng(seed)
    if mode == "same-class":
        by_class = {}
        for c in np.unique(dataset.labels):
            members = np.flatnonzero(dataset.labels == c)
            if len(members) < 2:
                raise EmptyClassError(
                    f"class {c} has {len(members)} member(s); same-class pairing needs >= 2"
                )
            by_class[int(c)] = members
    pairs = []
    for _ in range(count):
        fixed_idx = int(rng.integers(n))
        if mode == "same-class":
            pool = by_class[int(dataset.labels[fixed_idx])]
        else:
            pool = None
        while True:
            moving_idx = int(pool[rng.integers(len(pool))]) if pool is not None else int(rng.integers(n))
            if moving_idx != fixed_idx:
                break
        pairs.append(
            ImagePair(
                fixed=dataset.images[fixed_idx],
                moving=dataset.images[moving_idx],
                fixed_index=fixed_idx,
                moving_index=moving_idx,
                pairing_mode=mode,
            )
        )
    return pairs


def smooth_images(images, sigma):
    """Gaussian presmoothing over the spatial axes (sigma 0 is a no-op)."""
    if sigma <= 0:
        return np.asarray(images)
    images = np.asarray(images)
    spatial = (0,) * (images.ndim - 2) + (sigma, sigma)
    return gaussian_filter(images, sigma=spatial).astype(images.dtype, copy=False)
