"""Non-IID client partitioning with per-class Dirichlet proportions."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt

from orthofcl.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """The sample indices of every client in every task.

    `shards[t][k]` holds the ascending sample indices of client k in task t.
    Within a task every index belongs to exactly one client.
    """

    shards: tuple[tuple[np.ndarray, ...], ...]
    beta: float

    @property
    def num_tasks(self) -> int:
        """The number of tasks.

        Returns
        -------
        int
            The number of tasks.
        """

        return len(self.shards)

    @property
    def num_clients(self) -> int:
        """The number of clients K.

        Returns
        -------
        int
            The number of clients.
        """

        return len(self.shards[0]) if self.shards else 0

    def counts(self, t: int) -> list[int]:
        """The local sample counts n_k of a task.

        Parameters
        ----------
        t : int
            The task index.

        Returns
        -------
        list[int]
            The number of samples of every client.
        """

        return [len(s) for s in self.shards[t]]

    def histograms(
        self, labels: npt.ArrayLike, t: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """The per-client class histograms of a task.

        Parameters
        ----------
        labels : ArrayLike
            The labels the plan was built from.
        t : int
            The task index.

        Returns
        -------
        tuple[np.ndarray, np.ndarray]
            The task's classes, and a (K, classes) matrix of counts.
        """

        labels = np.asarray(labels)
        task_idx = np.concatenate(self.shards[t])
        classes = np.unique(labels[task_idx])
        counts = np.array(
            [
                [int(np.sum(labels[shard] == c)) for c in classes]
                for shard in self.shards[t]
            ]
        )

        return classes, counts


def _largest_remainder(proportions: np.ndarray, n: int) -> np.ndarray:
    raw = proportions * n
    counts = np.floor(raw).astype(np.int64)
    remainder = n - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1

    return counts


def dirichlet_partition(
    labels: npt.ArrayLike,
    num_clients: int,
    beta: float,
    seed: int,
    *,
    tasks: Sequence[Sequence[int]] | None = None,
) -> PartitionPlan:
    """Split every task's samples across clients, class by class.

    For each class, client proportions are drawn from Dirichlet(β·1_K) and
    the class's shuffled samples are dealt out by largest-remainder
    rounding. A client left empty in a task receives one sample from the
    largest client.

    Parameters
    ----------
    labels : ArrayLike
        The class of every sample.
    num_clients : int
        The number of clients K.
    beta : float
        The Dirichlet concentration β. Smaller is more heterogeneous.
    seed : int
        The random seed.
    tasks : Sequence[Sequence[int]] | None, optional
        The classes of every task, by default None, which means one task
        with every class.

    Returns
    -------
    PartitionPlan
        The plan.

    Raises
    ------
    ConfigError
        * If β is not positive or K is less than 1.
        * If a task has fewer samples than clients.
    """

    if beta <= 0:
        raise ConfigError("The Dirichlet concentration β should be positive.")

    if num_clients < 1:
        raise ConfigError("There should be at least one client.")

    labels = np.asarray(labels)
    if tasks is None:
        tasks = [np.unique(labels).tolist()]

    rng = np.random.default_rng(seed)
    shards = []

    for t, classes in enumerate(tasks):
        assigned: list[list[int]] = [[] for _ in range(num_clients)]

        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            if num_clients == 1:
                proportions = np.ones(1)
            else:
                proportions = rng.dirichlet(np.full(num_clients, float(beta)))
            bounds = np.cumsum(_largest_remainder(proportions, len(idx)))[:-1]

            for k, part in enumerate(np.split(idx, bounds)):
                assigned[k].extend(int(i) for i in part)

        if sum(len(a) for a in assigned) < num_clients:
            raise ConfigError(
                f"Task {t} has fewer samples than the {num_clients} clients."
            )

        for k in range(num_clients):
            if not assigned[k]:
                donor = max(range(num_clients), key=lambda j: (len(assigned[j]), -j))
                assigned[k].append(assigned[donor].pop())
                logger.debug(
                    "task %d: moved one sample from client %d to %d", t, donor, k
                )

        shards.append(tuple(np.array(sorted(a), dtype=np.int64) for a in assigned))

    return PartitionPlan(shards=tuple(shards), beta=float(beta))


def gini(values: npt.ArrayLike) -> float:
    """The Gini coefficient of non-negative values.

    Parameters
    ----------
    values : ArrayLike
        The values.

    Returns
    -------
    float
        0 for a uniform vector, approaching 1 when one entry holds everything.
        0 for an all-zero vector.
    """

    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    total = x.sum()

    if n == 0 or total == 0:
        return 0.0

    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * total))


def mean_gini(plan: PartitionPlan, labels: npt.ArrayLike, t: int = 0) -> float:
    """The mean Gini coefficient of the per-client class histograms.

    Parameters
    ----------
    plan : PartitionPlan
        The plan.
    labels : ArrayLike
        The labels the plan was built from.
    t : int, optional
        The task index, by default 0.

    Returns
    -------
    float
        The mean over clients.
    """

    _, counts = plan.histograms(labels, t)
    return float(np.mean([gini(row) for row in counts]))
