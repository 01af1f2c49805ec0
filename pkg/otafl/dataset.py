"""Contains data structures for labeled examples and per-device
datasets, the MNIST IDX reader, the synthetic fallback data source and
the one-class-per-device partition.
"""

import dataclasses
import logging
import pathlib
import struct
from typing import BinaryIO, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

import params
from otafl import OtaflException

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class LabeledExample(NamedTuple):
    """A single data point: a flattened feature vector and its class."""

    features: FloatArray
    label: int


@dataclasses.dataclass
class DeviceDataset:
    """Private dataset of one device.

    Features are stored row-wise without the bias entry; the bias is
    handled by the parameter layout (see otafl.model).
    """

    device_id: int
    features: FloatArray
    labels: IntArray

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not self.labels.size:
            raise EmptyDatasetException(
                params.MESSAGES.EMPTY_DATASET.format(self.device_id)
            )
        if self.features.shape[0] != self.labels.size:
            raise RowCountMismatchException(
                params.MESSAGES.ROW_MISMATCH.format(
                    self.device_id, self.features.shape[0], self.labels.size
                )
            )
        if self.labels.min() < 0:
            raise InvalidLabelException(
                params.MESSAGES.NEGATIVE_LABEL.format(
                    self.device_id, int(self.labels.min())
                )
            )

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def input_dim(self) -> int:
        """Length of a feature vector."""
        return int(self.features.shape[1])

    @property
    def examples(self) -> List[LabeledExample]:
        """The dataset as a list of LabeledExample objects."""
        return [
            LabeledExample(row, int(label))
            for row, label in zip(self.features, self.labels)
        ]

    @classmethod
    def from_examples(
        cls, device_id: int, examples: Sequence[LabeledExample]
    ) -> "DeviceDataset":
        """Create a DeviceDataset from a sequence of examples.

        Args:
            device_id (int): Device index m.
            examples (Sequence[otafl.dataset.LabeledExample]): The
                device's examples.

        Returns:
            otafl.dataset.DeviceDataset: The assembled dataset.

        Raises:
            otafl.dataset.EmptyDatasetException: If examples is empty.

        """
        if not examples:
            raise EmptyDatasetException(
                params.MESSAGES.EMPTY_DATASET.format(device_id)
            )
        return cls(
            device_id,
            np.stack([np.asarray(ex.features, dtype=np.float64) for ex in examples]),
            np.array([ex.label for ex in examples], dtype=np.int64),
        )


class ExamplePool(NamedTuple):
    """A labeled pool of examples held as arrays."""

    features: FloatArray
    labels: IntArray

    def __len__(self) -> int:
        return int(self.labels.size)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample]) -> "ExamplePool":
        """Stack a sequence of examples into a pool."""
        return cls(
            np.stack([np.asarray(ex.features, dtype=np.float64) for ex in examples]),
            np.array([ex.label for ex in examples], dtype=np.int64),
        )


def _read_be32(file: BinaryIO) -> int:
    (value,) = struct.unpack(">i", file.read(4))
    return int(value)


def read_idx_images(path: pathlib.Path) -> FloatArray:
    """Read an IDX image file and scale its pixels to [0, 1].

    Args:
        path (pathlib.Path): Path to an idx3-ubyte file.

    Returns:
        FloatArray: Array of shape (count, rows * cols).

    Raises:
        otafl.dataset.IdxFormatException: If the magic number is not
            that of an image file.

    """
    with open(path, "rb") as file:
        magic = _read_be32(file)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatException(params.MESSAGES.BAD_IDX_MAGIC.format(path, magic))
        count = _read_be32(file)
        rows = _read_be32(file)
        cols = _read_be32(file)
        pixels = np.frombuffer(file.read(count * rows * cols), dtype=np.uint8)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def read_idx_labels(path: pathlib.Path) -> IntArray:
    """Read an IDX label file.

    Args:
        path (pathlib.Path): Path to an idx1-ubyte file.

    Returns:
        IntArray: Array of class indices.

    Raises:
        otafl.dataset.IdxFormatException: If the magic number is not
            that of a label file.

    """
    with open(path, "rb") as file:
        magic = _read_be32(file)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatException(params.MESSAGES.BAD_IDX_MAGIC.format(path, magic))
        count = _read_be32(file)
        labels = np.frombuffer(file.read(count), dtype=np.uint8)
    return labels.astype(np.int64)


def load_mnist(directory: pathlib.Path, split: str) -> ExamplePool:
    """Load an MNIST split from its IDX files.

    Args:
        directory (pathlib.Path): Folder holding the four IDX files.
        split (str): "train" or "test".

    Returns:
        otafl.dataset.ExamplePool: The whole split.

    """
    images_name, labels_name = MNIST_FILES[split]
    pool = ExamplePool(
        read_idx_images(directory.joinpath(images_name)),
        read_idx_labels(directory.joinpath(labels_name)),
    )
    logger.info("Loaded %d MNIST %s examples from %s", len(pool), split, directory)
    return pool


def synthetic_class_means(
    rng: np.random.Generator,
    n_classes: int = params.LEARNING.N_CLASSES,
    input_dim: int = params.LEARNING.INPUT_DIM,
) -> FloatArray:
    """Draw one sparse, image-like mean vector in [0, 1] per class."""
    mask = rng.uniform(size=(n_classes, input_dim)) < 0.2
    return rng.uniform(0.3, 1.0, size=(n_classes, input_dim)) * mask


def synthetic_pool(
    class_means: FloatArray,
    per_class: int,
    rng: np.random.Generator,
    spread: float = 0.25,
) -> ExamplePool:
    """Draw Gaussian blobs around class means, clipped to [0, 1].

    Args:
        class_means (FloatArray): Array of shape (n_classes, input_dim).
        per_class (int): Number of examples per class.
        rng (numpy.random.Generator): Data stream.
        spread (float): Standard deviation of every pixel. Defaults to
            0.25.

    Returns:
        otafl.dataset.ExamplePool: Class-sorted pool with per_class
            examples of every class.

    """
    n_classes, input_dim = class_means.shape
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    noise = rng.normal(0.0, spread, size=(labels.size, input_dim))
    features = np.clip(class_means[labels] + noise, 0.0, 1.0)
    return ExamplePool(features, labels)


def sample_balanced(
    pool: ExamplePool, per_class: int, n_classes: int, rng: np.random.Generator
) -> ExamplePool:
    """Draw per_class examples of each class without replacement.

    Raises:
        otafl.dataset.MissingClassException: If a class has fewer than
            per_class examples in the pool.

    """
    chosen = []  # type: List[IntArray]
    for label in range(n_classes):
        candidates = np.flatnonzero(pool.labels == label)
        if candidates.size < max(per_class, 1):
            raise MissingClassException(params.MESSAGES.MISSING_CLASS.format(label))
        chosen.append(np.sort(rng.choice(candidates, size=per_class, replace=False)))
    index = np.concatenate(chosen)
    return ExamplePool(pool.features[index], pool.labels[index])


def sample_subset(
    pool: ExamplePool, size: int, rng: np.random.Generator
) -> ExamplePool:
    """Draw a uniformly random subset of the pool (all of it if
    smaller).
    """
    if size >= len(pool):
        return pool
    index = np.sort(rng.choice(len(pool), size=size, replace=False))
    return ExamplePool(pool.features[index], pool.labels[index])


def partition_one_class_per_device(
    pool: ExamplePool,
    n_devices: int,
    per_class: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[DeviceDataset]:
    """Give device m every example of class m.

    When per_class and rng are both given, per_class examples of each
    class are first drawn from the pool, so the partition is a
    deterministic function of the generator state.

    Args:
        pool (otafl.dataset.ExamplePool): Labeled examples.
        n_devices (int): Number of devices, equal to the class count.
        per_class (Optional[int]): Examples drawn per class.
        rng (Optional[numpy.random.Generator]): Data stream.

    Returns:
        List[otafl.dataset.DeviceDataset]: One single-label dataset per
            device.

    Raises:
        otafl.dataset.MissingClassException: If the pool lacks a class.

    """
    n_classes = int(pool.labels.max()) + 1 if len(pool) else 0
    if n_classes > n_devices:
        raise PartitionException(
            params.MESSAGES.DEVICE_CLASS_MISMATCH.format(n_classes, n_devices)
        )
    if per_class is not None and rng is not None:
        pool = sample_balanced(pool, per_class, n_devices, rng)
    datasets = []
    for device in range(n_devices):
        index = np.flatnonzero(pool.labels == device)
        if not index.size:
            raise MissingClassException(params.MESSAGES.MISSING_CLASS.format(device))
        datasets.append(DeviceDataset(device, pool.features[index], pool.labels[index]))
    return datasets


def pooled(datasets: Sequence[DeviceDataset]) -> Tuple[FloatArray, IntArray]:
    """Concatenate device datasets into one feature matrix and label
    vector.
    """
    return (
        np.concatenate([dataset.features for dataset in datasets]),
        np.concatenate([dataset.labels for dataset in datasets]),
    )


class EmptyDatasetException(OtaflException):
    """Raised when a device dataset has no examples."""


class MissingClassException(OtaflException):
    """Raised when an example pool lacks a class."""


class PartitionException(OtaflException):
    """Raised when the device count does not match the class count."""


class IdxFormatException(OtaflException):
    """Raised when an IDX file carries an unexpected magic number."""


class RowCountMismatchException(OtaflException):
    """Raised when feature rows and labels differ in number."""


class InvalidLabelException(OtaflException):
    """Raised when a dataset holds a negative class label."""
