"""The class-incremental dataset classes and loaders."""

import csv
import gzip
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from orthofcl.errors import ConfigError, DataError, ParseError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

#: Percentage of every class kept for training.
TRAIN_PERCENT = 80


class Provenance(str, Enum):
    """Where a dataset came from."""

    SYNTHETIC = "synthetic"
    INGESTED = "ingested"


class RasterFormat(str, Enum):
    """The supported raster file formats."""

    IDX = "idx"
    CSV = "csv"


def _train_mask(labels: np.ndarray) -> np.ndarray:
    """Mark the first 80% of every class, in sample order, as training."""

    mask = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        mask[idx[: len(idx) * TRAIN_PERCENT // 100]] = True

    return mask


class Dataset:
    """The pool of labeled samples before partitioning."""

    def __init__(
        self,
        samples: np.ndarray,
        labels: np.ndarray | list[int],
        *,
        train_mask: np.ndarray | None = None,
        provenance: Provenance = Provenance.SYNTHETIC,
    ) -> None:
        """Initialize the dataset.

        Parameters
        ----------
        samples : np.ndarray
            The samples as rows, shape (N, p).
        labels : np.ndarray | list[int]
            The class id of every sample, from 0 to C - 1.
        train_mask : np.ndarray | None, optional
            Whether every sample belongs to the training split, by default
            None, which means the first 80% of every class.
        provenance : Provenance, optional
            Where the samples came from, by default synthetic.

        Raises
        ------
        DataError
            * If the samples are not a finite 2-D array.
            * If the label count does not match the sample count.
            * If a label is negative.
            * If a class has no test sample.
        """

        samples = np.asarray(samples, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)

        if samples.ndim != 2 or not np.all(np.isfinite(samples)):
            raise DataError("The samples should be a finite 2-D array.")

        if labels.shape != (samples.shape[0],):
            raise DataError("There should be exactly one label per sample.")

        if labels.size and labels.min() < 0:
            raise DataError("The labels should be non-negative class ids.")

        self._samples = samples
        self._labels = labels
        self._train_mask = _train_mask(labels) if train_mask is None else train_mask
        self._provenance = provenance

        for c in self.classes:
            if not np.any(~self._train_mask & (labels == c)):
                raise DataError(f"Class {c} has no test sample.")

    @property
    def samples(self) -> np.ndarray:
        """The samples.

        Returns
        -------
        np.ndarray
            The (N, p) samples.
        """

        return self._samples

    @property
    def labels(self) -> np.ndarray:
        """The class ids.

        Returns
        -------
        np.ndarray
            The N class ids.
        """

        return self._labels

    @property
    def train_mask(self) -> np.ndarray:
        """The split tags.

        Returns
        -------
        np.ndarray
            `True` for training samples, `False` for test samples.
        """

        return self._train_mask

    @property
    def provenance(self) -> Provenance:
        """The origin of the samples.

        Returns
        -------
        Provenance
            Synthetic or ingested.
        """

        return self._provenance

    @property
    def classes(self) -> np.ndarray:
        """The distinct class ids.

        Returns
        -------
        np.ndarray
            The sorted class ids present.
        """

        return np.unique(self._labels)

    @property
    def input_dim(self) -> int:
        """The sample dimension p.

        Returns
        -------
        int
            The number of columns of the samples.
        """

        return self._samples.shape[1]

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        """The training split.

        Returns
        -------
        tuple[np.ndarray, np.ndarray]
            The training samples and labels.
        """

        return self._samples[self._train_mask], self._labels[self._train_mask]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        """The test split.

        Returns
        -------
        tuple[np.ndarray, np.ndarray]
            The test samples and labels.
        """

        return self._samples[~self._train_mask], self._labels[~self._train_mask]

    def check_clients(self, num_clients: int) -> None:
        """Check that every class can feed every client twice over.

        Parameters
        ----------
        num_clients : int
            The number of clients K.

        Raises
        ------
        ConfigError
            If a class has fewer than 2K training samples.
        """

        _, train_labels = self.train()
        for c in self.classes:
            count = int(np.sum(train_labels == c))
            if count < 2 * num_clients:
                raise ConfigError(
                    f"Class {c} has {count} training samples, fewer than twice "
                    f"the {num_clients} clients."
                )


@dataclass(frozen=True)
class SyntheticConfig:
    """The synthetic sphere-cluster dataset settings.

    Parameters
    ----------
    num_classes : int
        The number of classes C, by default 20.
    samples_per_class : int
        The number of samples per class, by default 60.
    input_dim : int
        The sample dimension p, by default 16.
    cluster_spread : float
        The Gaussian noise σ around every class mean, by default 0.5.
    cluster_separation : float
        The radius of the sphere the class means lie on, by default 3.0.
    seed : int | None
        The random seed, by default `None`, which means derived from the
        experiment seed.
    """

    num_classes: int = 20
    samples_per_class: int = 60
    input_dim: int = 16
    cluster_spread: float = 0.5
    cluster_separation: float = 3.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("The number of classes should be positive.")

        if self.samples_per_class < 2:
            raise ConfigError("Every class needs at least two samples.")

        if self.input_dim < 1:
            raise ConfigError("The input dimension should be positive.")

        if self.cluster_spread <= 0:
            raise ConfigError("The cluster spread should be positive.")


def generate_synthetic(cfg: SyntheticConfig, seed: int | None = None) -> Dataset:
    """Draw Gaussian clusters around means on a sphere.

    Parameters
    ----------
    cfg : SyntheticConfig
        The dataset settings.
    seed : int | None, optional
        The seed used when `cfg.seed` is `None`, by default None, which means
        0.

    Returns
    -------
    Dataset
        `num_classes * samples_per_class` samples, grouped by class, with an
        80/20 train/test split per class.
    """

    rng = np.random.default_rng(cfg.seed if cfg.seed is not None else (seed or 0))

    means = rng.standard_normal((cfg.num_classes, cfg.input_dim))
    means *= cfg.cluster_separation / np.linalg.norm(means, axis=1, keepdims=True)

    labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)
    noise = rng.standard_normal((labels.size, cfg.input_dim))
    samples = means[labels] + cfg.cluster_spread * noise

    return Dataset(samples, labels, provenance=Provenance.SYNTHETIC)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path, magic: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()

    if len(raw) < 8:
        raise ParseError(f"{path}: truncated IDX header", offset=len(raw))

    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ParseError(
            f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0
        )

    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated IDX dimensions", offset=len(raw))

    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise ParseError(
            f"{path}: expected {expected} bytes for dimensions {dims}, got "
            f"{len(raw)}",
            offset=min(len(raw), expected),
        )

    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _read_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)

        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None

        if "label" not in header:
            raise ParseError(f"{path}: missing the 'label' column", line=1)

        label_col = header.index("label")
        width = len(header)
        rows, labels = [], []

        for line, row in enumerate(reader, start=2):
            if not row:
                continue

            if len(row) != width:
                raise ParseError(
                    f"{path}: expected {width} fields, got {len(row)}", line=line
                )

            try:
                values = [float(v) for v in row]
            except ValueError:
                raise ParseError(f"{path}: non-numeric field", line=line) from None

            label = values.pop(label_col)
            if label != int(label) or label < 0:
                raise ParseError(f"{path}: invalid label {label}", line=line)

            if any(v < 0 or v > 255 for v in values):
                raise ParseError(f"{path}: pixel outside [0, 255]", line=line)

            rows.append(values)
            labels.append(int(label))

    if not rows:
        raise ParseError(f"{path}: no samples", line=2)

    return np.array(rows) / 255.0, np.array(labels)


def ingest_raster(
    path: str | Path,
    format: RasterFormat | str,
    *,
    labels_path: str | Path | None = None,
) -> Dataset:
    """Load a small raster image dataset.

    IDX images (magic 0x00000803, big-endian dimensions, unsigned byte
    pixels) pair with an IDX label file (magic 0x00000801); `.gz` files are
    decompressed. CSV files have a header row, a `label` column and pixel
    columns with intensities from 0 to 255. Pixels are scaled to [0, 1].

    Parameters
    ----------
    path : str | Path
        The image file.
    format : RasterFormat | str
        `"idx"` or `"csv"`.
    labels_path : str | Path | None, optional
        The IDX label file, by default None, which means the image file name
        with `images` replaced by `labels`.

    Returns
    -------
    Dataset
        Flattened images as rows with an 80/20 split per class.

    Raises
    ------
    ParseError
        If a file is malformed, with the byte offset (IDX) or the line
        number (CSV).
    """

    path = Path(path)
    format = RasterFormat(format)

    if format is RasterFormat.CSV:
        samples, labels = _read_csv(path)
    else:
        if labels_path is None:
            labels_path = path.with_name(path.name.replace("images", "labels"))

        images = _read_idx(path, IDX_IMAGES_MAGIC)
        labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC).astype(np.int64)

        if len(labels) != len(images):
            raise ParseError(
                f"{labels_path}: {len(labels)} labels for {len(images)} images",
                offset=4,
            )

        samples = images.reshape(len(images), -1) / 255.0

    logger.info("ingested %d samples of dimension %d from %s", *samples.shape, path)

    return Dataset(samples, labels, provenance=Provenance.INGESTED)


@dataclass(frozen=True)
class TaskSchedule:
    """The disjoint, equally sized class groups of the incremental tasks."""

    tasks: tuple[tuple[int, ...], ...]

    @property
    def num_tasks(self) -> int:
        """The number of tasks T.

        Returns
        -------
        int
            The number of tasks.
        """

        return len(self.tasks)

    @property
    def class_order(self) -> tuple[int, ...]:
        """The class ids in head row order.

        Returns
        -------
        tuple[int, ...]
            The tasks' classes concatenated.
        """

        return tuple(c for task in self.tasks for c in task)

    def task_range(self, t: int) -> tuple[int, int]:
        """The head rows of a task.

        Parameters
        ----------
        t : int
            The 0-based task index.

        Returns
        -------
        tuple[int, int]
            The half-open range of head rows.
        """

        start = sum(len(task) for task in self.tasks[:t])
        return start, start + len(self.tasks[t])

    def positions(self, labels: np.ndarray) -> np.ndarray:
        """Map class ids to head rows.

        Parameters
        ----------
        labels : np.ndarray
            Class ids.

        Returns
        -------
        np.ndarray
            The head row of every class id.
        """

        lookup = np.full(max(self.class_order) + 1, -1, dtype=np.int64)
        lookup[list(self.class_order)] = np.arange(len(self.class_order))

        return lookup[labels]


def build_schedule(dataset: Dataset, num_tasks: int, seed: int) -> TaskSchedule:
    """Shuffle the classes and chunk them into equal tasks.

    Parameters
    ----------
    dataset : Dataset
        The dataset.
    num_tasks : int
        The number of tasks T.
    seed : int
        The random seed.

    Returns
    -------
    TaskSchedule
        T disjoint tasks of C / T classes each.

    Raises
    ------
    ConfigError
        If C is not divisible by T.
    """

    classes = dataset.classes
    if num_tasks < 1 or len(classes) % num_tasks:
        raise ConfigError(
            f"{len(classes)} classes cannot be split into {num_tasks} equal tasks."
        )

    shuffled = np.random.default_rng(seed).permutation(classes)
    per_task = len(classes) // num_tasks

    return TaskSchedule(
        tasks=tuple(
            tuple(int(c) for c in shuffled[i * per_task : (i + 1) * per_task])
            for i in range(num_tasks)
        )
    )
