import numpy as np
import pytest

from orthofcl.errors import ConfigError
from orthofcl.partition import dirichlet_partition, gini, mean_gini

SEEDS = range(20)


@pytest.fixture
def labels() -> np.ndarray:
    return np.repeat(np.arange(10), 100)


def test_exact_cover(labels: np.ndarray) -> None:
    tasks = [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]]

    for seed in SEEDS:
        plan = dirichlet_partition(labels, 7, 0.1, seed, tasks=tasks)

        for t, classes in enumerate(tasks):
            shards = plan.shards[t]
            joined = np.concatenate(shards)

            assert len(joined) == len(np.unique(joined))
            assert sorted(joined) == np.flatnonzero(np.isin(labels, classes)).tolist()
            assert all(len(s) > 0 for s in shards)
            assert all(np.array_equal(s, np.sort(s)) for s in shards)


def test_single_client(labels: np.ndarray) -> None:
    plan = dirichlet_partition(labels, 1, 0.01, 3)

    assert plan.num_clients == 1
    assert plan.shards[0][0].tolist() == list(range(1000))


def test_near_uniform() -> None:
    labels = np.zeros(1000, dtype=np.int64)

    for seed in SEEDS:
        counts = dirichlet_partition(labels, 10, 1e6, seed).counts(0)

        assert sum(counts) == 1000
        assert all(80 <= n <= 120 for n in counts)


def test_heterogeneity_grows_as_beta_shrinks(labels: np.ndarray) -> None:
    def spread(beta: float) -> float:
        return np.mean(
            [mean_gini(dirichlet_partition(labels, 10, beta, s), labels) for s in SEEDS]
        )

    skewed, uniform = spread(0.1), spread(1e6)

    assert skewed > uniform


def test_deterministic(labels: np.ndarray) -> None:
    a = dirichlet_partition(labels, 5, 0.5, 9)
    b = dirichlet_partition(labels, 5, 0.5, 9)

    assert all(np.array_equal(x, y) for x, y in zip(a.shards[0], b.shards[0]))


def test_histograms(labels: np.ndarray) -> None:
    plan = dirichlet_partition(labels, 4, 0.5, 0, tasks=[[2, 7]])
    classes, counts = plan.histograms(labels, 0)

    assert classes.tolist() == [2, 7]
    assert counts.shape == (4, 2)
    assert counts.sum(axis=0).tolist() == [100, 100]


def test_errors(labels: np.ndarray) -> None:
    with pytest.raises(ConfigError):
        dirichlet_partition(labels, 3, 0.0, 0)

    with pytest.raises(ConfigError):
        dirichlet_partition(labels, 0, 1.0, 0)

    with pytest.raises(ConfigError):
        dirichlet_partition(np.array([0, 0, 1]), 5, 1.0, 0)


def test_gini() -> None:
    assert gini([5, 5, 5, 5]) == pytest.approx(0.0)
    assert gini([0, 0, 0, 8]) == pytest.approx(0.75)
    assert gini([0, 0]) == 0.0
