import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from orthofcl.data import (
    Dataset,
    Provenance,
    SyntheticConfig,
    TaskSchedule,
    build_schedule,
    generate_synthetic,
    ingest_raster,
)
from orthofcl.errors import ConfigError, DataError, ParseError


def _write_idx(path: Path, magic: int, array: np.ndarray) -> None:
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    path.write_bytes(header + array.astype(np.uint8).tobytes())


@pytest.fixture
def idx_files(tmp_path: Path) -> Path:
    images = np.zeros((4, 2, 2), dtype=np.uint8)
    images[1] = 255
    images[2] = [[0, 51], [102, 255]]
    images[3, 0, 0] = 17
    _write_idx(tmp_path / "images.idx", 0x00000803, images)
    _write_idx(tmp_path / "labels.idx", 0x00000801, np.array([0, 1, 0, 1]))

    return tmp_path / "images.idx"


def _centroid_accuracy(dataset: Dataset) -> float:
    train_x, train_y = dataset.train()
    test_x, test_y = dataset.test()
    classes = dataset.classes
    centroids = np.array([train_x[train_y == c].mean(axis=0) for c in classes])
    distances = np.linalg.norm(test_x[:, None, :] - centroids[None], axis=2)

    return float(np.mean(classes[np.argmin(distances, axis=1)] == test_y))


def test_generate_synthetic() -> None:
    cfg = SyntheticConfig(num_classes=6, samples_per_class=50, seed=3)
    dataset = generate_synthetic(cfg)

    assert dataset.samples.shape == (300, 16)
    assert len(dataset.train()[1]) == 240
    assert len(dataset.test()[1]) == 60
    assert dataset.provenance is Provenance.SYNTHETIC
    assert np.array_equal(dataset.samples, generate_synthetic(cfg).samples)

    assert not np.array_equal(
        generate_synthetic(SyntheticConfig(), seed=1).samples,
        generate_synthetic(SyntheticConfig(), seed=2).samples,
    )


def test_synthetic_separability() -> None:
    tight = generate_synthetic(SyntheticConfig(cluster_spread=1e-9, seed=0))
    assert _centroid_accuracy(tight) == 1.0

    accuracies = [
        _centroid_accuracy(
            generate_synthetic(
                SyntheticConfig(num_classes=10, samples_per_class=200, cluster_spread=s)
            )
        )
        for s in (0.1, 0.5, 1.0, 2.0)
    ]
    assert accuracies == sorted(accuracies, reverse=True)


def test_synthetic_config() -> None:
    with pytest.raises(ConfigError):
        SyntheticConfig(cluster_spread=0)

    with pytest.raises(ConfigError):
        SyntheticConfig(samples_per_class=1)


def test_dataset_checks() -> None:
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 1])

    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, -1])

    dataset = generate_synthetic(SyntheticConfig(num_classes=2, samples_per_class=10))
    dataset.check_clients(4)

    with pytest.raises(ConfigError):
        dataset.check_clients(5)


def test_ingest_idx(idx_files: Path) -> None:
    labels = idx_files.with_name("labels.idx")
    dataset = ingest_raster(idx_files, "idx", labels_path=labels)

    assert dataset.samples.shape == (4, 4)
    assert dataset.labels.tolist() == [0, 1, 0, 1]
    assert dataset.provenance is Provenance.INGESTED
    assert dataset.samples[0] == pytest.approx([0.0, 0.0, 0.0, 0.0])
    assert dataset.samples[2] == pytest.approx([0.0, 0.2, 0.4, 1.0])


def test_ingest_idx_default_labels_and_gzip(idx_files: Path) -> None:
    gz = idx_files.with_name("train-images.idx.gz")
    gz.write_bytes(gzip.compress(idx_files.read_bytes()))
    labels = idx_files.with_name("labels.idx").read_bytes()
    idx_files.with_name("train-labels.idx.gz").write_bytes(gzip.compress(labels))

    assert ingest_raster(gz, "idx").labels.tolist() == [0, 1, 0, 1]


def test_ingest_idx_malformed(idx_files: Path) -> None:
    labels = idx_files.with_name("labels.idx")

    bad = idx_files.with_name("bad.idx")
    bad.write_bytes(b"\x00\x00\x08\x01" + idx_files.read_bytes()[4:])
    with pytest.raises(ParseError) as excinfo:
        ingest_raster(bad, "idx", labels_path=labels)
    assert excinfo.value.offset == 0

    short = idx_files.with_name("short.idx")
    short.write_bytes(idx_files.read_bytes()[:-3])
    with pytest.raises(ParseError) as excinfo:
        ingest_raster(short, "idx", labels_path=labels)
    assert excinfo.value.offset is not None


def test_ingest_csv(tmp_path: Path) -> None:
    path = tmp_path / "digits.csv"
    path.write_text("label,p0,p1\n0,0,255\n1,0,0\n0,51,0\n1,255,255\n")

    dataset = ingest_raster(path, "csv")

    assert dataset.labels.tolist() == [0, 1, 0, 1]
    assert dataset.samples[0] == pytest.approx([0.0, 1.0])
    assert dataset.samples[1] == pytest.approx([0.0, 0.0])


def test_ingest_csv_malformed(tmp_path: Path) -> None:
    path = tmp_path / "digits.csv"

    path.write_text("p0,p1\n0,255\n")
    with pytest.raises(ParseError) as excinfo:
        ingest_raster(path, "csv")
    assert excinfo.value.line == 1

    path.write_text("label,p0\n0,1\n1,x\n")
    with pytest.raises(ParseError) as excinfo:
        ingest_raster(path, "csv")
    assert excinfo.value.line == 3


def test_build_schedule() -> None:
    dataset = generate_synthetic(SyntheticConfig(num_classes=10, samples_per_class=5))
    schedule = build_schedule(dataset, 5, seed=1)

    assert schedule.num_tasks == 5
    assert all(len(task) == 2 for task in schedule.tasks)
    assert sorted(schedule.class_order) == list(range(10))
    assert schedule == build_schedule(dataset, 5, seed=1)
    assert build_schedule(dataset, 10, seed=0).num_tasks == 10

    with pytest.raises(ConfigError):
        build_schedule(dataset, 3, seed=0)


def test_task_schedule_positions() -> None:
    schedule = TaskSchedule(tasks=((3, 1), (0, 2)))

    assert schedule.task_range(1) == (2, 4)
    assert schedule.positions(np.array([0, 1, 2, 3])).tolist() == [2, 1, 3, 0]
