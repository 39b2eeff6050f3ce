"""Accuracy matrices, final average accuracy and communication accounting."""

import csv
import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from orthofcl.data import TaskSchedule
from orthofcl.errors import DataError, ParseError, StateError
from orthofcl.model import ModelState, forward
from orthofcl.seeding import select_clients

if TYPE_CHECKING:
    from orthofcl.config import ExperimentConfig

logger = logging.getLogger(__name__)

#: Bytes per transmitted parameter (64-bit floats).
BYTES_PER_PARAM = 8


class AccuracyMatrix:
    """The lower triangular matrix of accuracies R[t][i], task i after task t."""

    def __init__(self, num_tasks: int) -> None:
        """Initialize an empty matrix.

        Parameters
        ----------
        num_tasks : int
            The number of tasks T.
        """

        self._num_tasks = num_tasks
        self._rows: list[tuple[float, ...]] = []

    @property
    def num_tasks(self) -> int:
        """The number of tasks T.

        Returns
        -------
        int
            The number of tasks.
        """

        return self._num_tasks

    @property
    def rows(self) -> list[tuple[float, ...]]:
        """The rows recorded so far, row t holding t + 1 entries.

        Returns
        -------
        list[tuple[float, ...]]
            The rows.
        """

        return list(self._rows)

    def __len__(self) -> int:
        return len(self._rows)

    def __getitem__(self, t: int) -> tuple[float, ...]:
        return self._rows[t]

    @property
    def complete(self) -> bool:
        """Whether every task has its row.

        Returns
        -------
        bool
            `True` once T rows are recorded.
        """

        return len(self._rows) == self._num_tasks

    def add_row(self, row: Sequence[float]) -> None:
        """Append the accuracies after the next task.

        Parameters
        ----------
        row : Sequence[float]
            One accuracy in [0, 1] for each task seen so far.

        Raises
        ------
        StateError
            If the matrix is already complete.
        DataError
            If the row has the wrong length or an entry outside [0, 1].
        """

        if self.complete:
            raise StateError("The accuracy matrix is already complete.")

        row = tuple(float(x) for x in row)
        if len(row) != len(self._rows) + 1:
            raise DataError(
                f"Row {len(self._rows)} should have {len(self._rows) + 1} "
                f"entries, got {len(row)}."
            )

        if any(not 0.0 <= x <= 1.0 for x in row):
            raise DataError("Accuracies should lie in [0, 1].")

        self._rows.append(row)

    def final_row(self) -> tuple[float, ...]:
        """The accuracies after the last task.

        Returns
        -------
        tuple[float, ...]
            The last row.

        Raises
        ------
        StateError
            If the matrix is not complete.
        """

        if not self.complete:
            raise StateError(
                f"The accuracy matrix has {len(self._rows)} of "
                f"{self._num_tasks} rows."
            )

        return self._rows[-1]

    def to_csv(self) -> str:
        """Write the matrix as CSV.

        Returns
        -------
        str
            A `task_1,...,task_T` header and one line per recorded row, with
            empty cells above the diagonal.
        """

        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow([f"task_{i + 1}" for i in range(self._num_tasks)])

        for row in self._rows:
            cells = [repr(x) for x in row]
            writer.writerow(cells + [""] * (self._num_tasks - len(cells)))

        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        """Read a matrix written by `to_csv`.

        Parameters
        ----------
        text : str
            The CSV text.

        Returns
        -------
        AccuracyMatrix
            The matrix.

        Raises
        ------
        ParseError
            If the text is not a lower triangular accuracy table, with the
            offending line number.
        """

        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if not header:
            raise ParseError("The accuracy CSV is empty.", line=1)

        matrix = cls(len(header))
        for line, cells in enumerate(reader, start=2):
            if not any(c.strip() for c in cells):
                continue

            filled = [c for c in cells if c.strip()]
            try:
                matrix.add_row([float(c) for c in filled])
            except ValueError as exc:
                raise ParseError(f"bad accuracy row: {exc}", line=line) from exc

            if any(not c.strip() for c in cells[: len(filled)]):
                raise ParseError("empty cell below the diagonal", line=line)

        return matrix

    @classmethod
    def load(cls, path: str | Path) -> "AccuracyMatrix":
        """Read a matrix from a CSV file.

        Parameters
        ----------
        path : str | Path
            The file.

        Returns
        -------
        AccuracyMatrix
            The matrix.
        """

        return cls.from_csv(Path(path).read_text())


def evaluate(
    model: ModelState,
    schedule: TaskSchedule,
    samples: np.ndarray,
    labels: np.ndarray,
    upto: int,
) -> tuple[float, ...]:
    """Compute the top-1 accuracy on every task seen so far.

    Logits cover every seen class; ties go to the lowest head row.

    Parameters
    ----------
    model : ModelState
        The global model.
    schedule : TaskSchedule
        The task schedule.
    samples : np.ndarray
        The test samples.
    labels : np.ndarray
        The test class ids.
    upto : int
        The 0-based index of the last trained task.

    Returns
    -------
    tuple[float, ...]
        The accuracy on tasks 0 to `upto`, i.e. row `upto` of the matrix.
    """

    labels = np.asarray(labels)
    accuracies = []

    for i in range(upto + 1):
        mask = np.isin(labels, schedule.tasks[i])
        if not np.any(mask):
            raise DataError(f"Task {i} has no test samples.")

        logits, _ = forward(model, samples[mask])
        predicted = np.argmax(logits, axis=1)
        accuracies.append(float(np.mean(predicted == schedule.positions(labels[mask]))))

    return tuple(accuracies)


def faa(matrix: AccuracyMatrix) -> float:
    """The final average accuracy, the mean of the last row.

    Parameters
    ----------
    matrix : AccuracyMatrix
        The accuracy matrix.

    Returns
    -------
    float
        The mean accuracy over all tasks after the final task.

    Raises
    ------
    StateError
        If the final row is missing.
    """

    row = matrix.final_row()
    return sum(row) / len(row)


def forgetting(matrix: AccuracyMatrix) -> float:
    """The mean drop from each earlier task's best accuracy to its final one.

    Parameters
    ----------
    matrix : AccuracyMatrix
        The complete accuracy matrix.

    Returns
    -------
    float
        The average forgetting over tasks 0 to T - 2, 0 for a single task.
    """

    final = matrix.final_row()
    if len(final) == 1:
        return 0.0

    drops = [
        max(matrix[t][i] for t in range(i, len(final) - 1)) - final[i]
        for i in range(len(final) - 1)
    ]
    return sum(drops) / len(drops)


def backward_transfer(matrix: AccuracyMatrix) -> float:
    """The mean change from each task's accuracy when learned to its final one.

    Parameters
    ----------
    matrix : AccuracyMatrix
        The complete accuracy matrix.

    Returns
    -------
    float
        The backward transfer, negative when earlier tasks are forgotten.
    """

    final = matrix.final_row()
    if len(final) == 1:
        return 0.0

    changes = [final[i] - matrix[i][i] for i in range(len(final) - 1)]
    return sum(changes) / len(changes)


def average_incremental_accuracy(matrix: AccuracyMatrix) -> float:
    """The mean over tasks of each row's mean accuracy.

    Parameters
    ----------
    matrix : AccuracyMatrix
        The accuracy matrix.

    Returns
    -------
    float
        The average incremental accuracy.
    """

    matrix.final_row()
    return float(np.mean([sum(row) / len(row) for row in matrix.rows]))


class CommKind(str, Enum):
    """The kinds of client/server exchange."""

    CALIBRATION = "calibration"
    ROUND = "round"
    BASIS = "basis"


@dataclass(frozen=True)
class CommRecord:
    """The parameters one client exchanged in one step."""

    task: int
    round: int
    client_id: int
    kind: CommKind
    upload: int
    download: int

    @property
    def upload_bytes(self) -> int:
        return BYTES_PER_PARAM * self.upload

    @property
    def download_bytes(self) -> int:
        return BYTES_PER_PARAM * self.download


@dataclass
class CommLedger:
    """Every exchange of an experiment, in protocol order."""

    records: list[CommRecord] = field(default_factory=list)

    def add(self, record: CommRecord) -> None:
        self.records.append(record)

    def total_upload(self) -> int:
        """The uploaded parameter count over all records.

        Returns
        -------
        int
            The total upload.
        """

        return sum(r.upload for r in self.records)

    def total_download(self) -> int:
        """The downloaded parameter count over all records.

        Returns
        -------
        int
            The total download.
        """

        return sum(r.download for r in self.records)

    def select(
        self,
        task: int | None = None,
        round: int | None = None,
        kind: CommKind | None = None,
    ) -> list[CommRecord]:
        """Filter the records.

        Parameters
        ----------
        task, round : int | None, optional
            Keep only this task or round, by default any.
        kind : CommKind | None, optional
            Keep only this kind, by default any.

        Returns
        -------
        list[CommRecord]
            The matching records.
        """

        return [
            r
            for r in self.records
            if (task is None or r.task == task)
            and (round is None or r.round == round)
            and (kind is None or r.kind is kind)
        ]

    def to_dict(self) -> dict:
        return {
            "records": [
                [r.task, r.round, r.client_id, r.kind.value, r.upload, r.download]
                for r in self.records
            ],
            "total_upload": self.total_upload(),
            "total_download": self.total_download(),
            "total_upload_bytes": BYTES_PER_PARAM * self.total_upload(),
            "total_download_bytes": BYTES_PER_PARAM * self.total_download(),
        }


def round_upload(num_layers: int, dim: int, rank: int, task_classes: int) -> int:
    """The parameters a client uploads after local training.

    Every layer's B_K and B_V (r × d each) and the current task's head rows.
    """

    return num_layers * 2 * rank * dim + task_classes * dim


def round_download(num_layers: int, dim: int, rank: int, seen_classes: int) -> int:
    """The parameters a client downloads at broadcast.

    Every layer's A and B for both projections and the head of every seen class.
    """

    return num_layers * 2 * 2 * dim * rank + seen_classes * dim


def basis_upload(num_layers: int, dim: int, rank: int) -> int:
    """The parameters of one adapter basis candidate, d × r per projection."""

    return num_layers * 2 * dim * rank


def comm_cost(
    config: "ExperimentConfig", num_classes: int | None = None
) -> CommLedger:
    """Count the exchanges of an experiment in closed form.

    Parameters
    ----------
    config : ExperimentConfig
        The experiment settings.
    num_classes : int | None, optional
        The number of classes C, by default None, which means the synthetic
        dataset's class count.

    Returns
    -------
    CommLedger
        The ledger a run with every client holding data would record.
    """

    cfg = config.round
    layers, dim = config.backbone.num_layers, config.backbone.embed_dim
    rank, tasks = config.rank, config.num_tasks
    per_task = (num_classes or config.data.num_classes) // tasks
    clients = range(cfg.num_clients)
    learned_bases = not config.random_a
    basis = basis_upload(layers, dim, rank)

    ledger = CommLedger()
    if learned_bases:
        for k in clients:
            ledger.add(
                CommRecord(0, -1, k, CommKind.CALIBRATION, basis, 0)
            )

    for t in range(tasks):
        for rnd in range(cfg.rounds_per_task):
            for k in select_clients(
                cfg.num_clients, cfg.participation, config.seed, t, rnd
            ):
                ledger.add(
                    CommRecord(
                        t,
                        rnd,
                        k,
                        CommKind.ROUND,
                        round_upload(layers, dim, rank, per_task),
                        round_download(layers, dim, rank, (t + 1) * per_task),
                    )
                )

        if learned_bases and t < tasks - 1:
            for k in clients:
                ledger.add(
                    CommRecord(t, -1, k, CommKind.BASIS, basis, 0)
                )

    return ledger
