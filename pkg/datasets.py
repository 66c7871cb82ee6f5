"""
Explanation Lab - Datasets
IDX (MNIST-format) ingestion and small seeded synthetic datasets.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from errors import DimensionError, IdxFormatError, LabelRangeError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class LabeledDataset:
    """Flattened images in [0, 1] (n x d) with integer labels"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: Tuple[int, ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise DimensionError(f"images must be (n, d), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError(f"{self.images.shape[0]} images but labels shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes}), got range "
                                  f"[{self.labels.min()}, {self.labels.max()}]")
        if not self.image_shape:
            self.image_shape = (self.images.shape[1],)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes, self.image_shape)

    def split(self, test_fraction: float, seed: int) -> Tuple["LabeledDataset", "LabeledDataset"]:
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def read_idx(path: Union[str, Path], expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse one unsigned-byte IDX file into an array of its declared shape"""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(data)} bytes)", offset=0)

    (magic,) = struct.unpack(">I", data[:4])
    allowed = (expected_magic,) if expected_magic is not None else (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC)
    if magic not in allowed:
        expected = " or ".join(f"0x{m:08x}" for m in allowed)
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected {expected}", offset=0)

    dims = magic & 0xFF
    header_size = 4 + 4 * dims
    if len(data) < header_size:
        raise IdxFormatError(f"{path}: truncated header, expected {header_size} bytes, got {len(data)}", offset=4)
    shape = struct.unpack(f">{dims}I", data[4:header_size])

    expected_bytes = header_size + int(np.prod(shape))
    if len(data) != expected_bytes:
        raise IdxFormatError(f"{path}: payload size mismatch, expected {expected_bytes} bytes, got {len(data)}",
                             offset=header_size)
    return np.frombuffer(data, dtype=np.uint8, offset=header_size).reshape(shape)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path], num_classes: int = 10) -> LabeledDataset:
    """Image/label IDX pair -> flattened f64 images scaled to [0, 1]"""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    logger.info(f"loaded {flat.shape[0]} images of shape {images.shape[1:]} from {images_path}")
    return LabeledDataset(flat, labels.astype(np.int64), num_classes, tuple(images.shape[1:]))


def load_mnist_dir(directory: Union[str, Path]) -> Tuple[LabeledDataset, LabeledDataset]:
    root = Path(directory)
    train = load_idx(root / MNIST_FILES["train_images"], root / MNIST_FILES["train_labels"])
    test = load_idx(root / MNIST_FILES["test_images"], root / MNIST_FILES["test_labels"])
    return train, test


def write_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write a uint8 array as IDX; used to build fixtures"""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    path.write_bytes(header + array.tobytes())
    return path


def make_blobs(n_per_class: int, seed: int, separation: float = 4.0, spread: float = 0.5) -> LabeledDataset:
    """Two linearly separable 2-D Gaussian blobs centred at -/+ separation/2 on the first axis"""
    rng = np.random.default_rng(seed)
    centers = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    points, labels = [], []
    for label, center in enumerate(centers):
        cloud = center + spread * rng.standard_normal((n_per_class, 2))
        # keep the two classes on their own side of x1 = 0
        cloud[:, 0] = np.sign(center[0]) * np.maximum(np.abs(cloud[:, 0]), 0.1)
        points.append(cloud)
        labels.append(np.full(n_per_class, label))
    return LabeledDataset(np.concatenate(points), np.concatenate(labels), 2)


def make_prototype_images(n: int, side: int, num_classes: int, seed: int, noise: float = 0.15) -> LabeledDataset:
    """Noisy copies of one random blocky prototype per class, clipped to [0, 1]"""
    rng = np.random.default_rng(seed)
    coarse = max(side // 2, 1)
    prototypes = []
    for _ in range(num_classes):
        blocks = (rng.random((coarse, coarse)) > 0.5).astype(np.float64)
        image = np.kron(blocks, np.ones((2, 2)))[:side, :side]
        if image.shape != (side, side):
            image = np.pad(image, ((0, side - image.shape[0]), (0, side - image.shape[1])))
        prototypes.append(image.reshape(-1))
    prototypes = np.stack(prototypes)

    labels = rng.integers(0, num_classes, size=n)
    images = np.clip(prototypes[labels] + noise * rng.standard_normal((n, side * side)), 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes, (side, side))
