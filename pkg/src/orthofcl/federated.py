"""The federated protocol.

Every task runs `rounds_per_task` rounds of broadcast, local training of the
B matrices and head rows, and n_k-weighted averaging on the server. After
the last round the global model merges the task's adapters, every client
grows its subspace memory with the activations of its final local epoch and
proposes the next task's adapter bases, and the server averages the
proposals and re-orthonormalizes them.

Client randomness derives only from (experiment seed, client id, task,
round), and aggregation sums in ascending client id, so results do not
depend on the number of worker threads.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from orthofcl import __VERSION__
from orthofcl.data import (
    Dataset,
    TaskSchedule,
    build_schedule,
    generate_synthetic,
    ingest_raster,
)
from orthofcl.errors import (
    CapacityError,
    ConfigError,
    ProtocolError,
    RankError,
    StateError,
)
from orthofcl.linalg import RANK_TOL, DenseMatrix, fix_signs, qr_orthonormalize
from orthofcl.memory import (
    ActivationBuffer,
    MemoryBank,
    MemoryConfig,
    Projection,
    select_adapter_basis,
    update_memory,
)
from orthofcl.metrics import (
    AccuracyMatrix,
    CommKind,
    CommLedger,
    CommRecord,
    average_incremental_accuracy,
    backward_transfer,
    basis_upload,
    evaluate,
    faa,
    forgetting,
    round_download,
    round_upload,
)
from orthofcl.model import (
    LayerAdapters,
    LoraAdapter,
    ModelState,
    OptimizerState,
    apply_adamw,
    begin_task,
    forward,
    init_backbone,
    loss_and_grads,
    merge_current_task,
    random_bases,
    replace_trainables,
)
from orthofcl.partition import dirichlet_partition
from orthofcl.seeding import Stream, derive_rng, derive_seed, select_clients

if TYPE_CHECKING:
    from orthofcl.config import ExperimentConfig

logger = logging.getLogger(__name__)

#: Per layer, the (A_K, A_V) adapter bases.
Bases = tuple[tuple[DenseMatrix, DenseMatrix], ...]


@dataclass(frozen=True)
class RoundConfig:
    """The federated round settings.

    Parameters
    ----------
    num_clients : int
        The number of clients K, by default 10.
    local_epochs : int
        The local epochs E per round, by default 5.
    rounds_per_task : int
        The server aggregations per task, by default 1.
    batch_size : int
        The local minibatch size, by default 16.
    participation : float
        The fraction of clients selected per round, in (0, 1], by default 1.
    """

    num_clients: int = 10
    local_epochs: int = 5
    rounds_per_task: int = 1
    batch_size: int = 16
    participation: float = 1.0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("There should be at least one client.")

        if self.local_epochs < 1:
            raise ConfigError("There should be at least one local epoch.")

        if self.rounds_per_task < 1:
            raise ConfigError("There should be at least one round per task.")

        if self.batch_size < 1:
            raise ConfigError("The batch size should be positive.")

        if not 0 < self.participation <= 1:
            raise ConfigError("The participation should be in (0, 1].")


@dataclass(frozen=True, eq=False)
class AdapterUpdate:
    """A client's trained tensors, sent to the server after a round."""

    client_id: int
    b_k: tuple[DenseMatrix, ...]
    b_v: tuple[DenseMatrix, ...]
    head_rows: DenseMatrix
    n_k: int

    @property
    def num_params(self) -> int:
        return sum(b.size for b in self.b_k + self.b_v) + self.head_rows.size

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "b_k": [b.tolist() for b in self.b_k],
            "b_v": [b.tolist() for b in self.b_v],
            "head_rows": self.head_rows.tolist(),
            "n_k": self.n_k,
        }


@dataclass(frozen=True, eq=False)
class BasisCandidate:
    """A client's proposed adapter bases for the next task."""

    client_id: int
    bases: Bases
    n_k: int

    @property
    def num_params(self) -> int:
        return sum(a.size for pair in self.bases for a in pair)

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "bases": [[a.tolist() for a in pair] for pair in self.bases],
            "n_k": self.n_k,
        }


@dataclass(frozen=True, eq=False)
class AggregatedAdapters:
    """The server's weighted mean of the client updates."""

    b_k: tuple[DenseMatrix, ...]
    b_v: tuple[DenseMatrix, ...]
    head_rows: DenseMatrix
    total_samples: int


@dataclass(eq=False)
class ClientState:
    """One simulated client.

    `shards[t]` holds the client's training inputs of task t and their head
    rows. Activation buffers are filled during the final local epoch and
    consumed at the task boundary.
    """

    client_id: int
    shards: tuple[tuple[np.ndarray, np.ndarray], ...]
    memories: MemoryBank
    memory_config: MemoryConfig
    optimizer: OptimizerState
    seed: int
    model: ModelState | None = None
    buffers: dict[tuple[int, Projection], ActivationBuffer] = field(
        default_factory=dict
    )
    last_losses: list[float] = field(default_factory=list)

    def sample_count(self, t: int) -> int:
        """The number n_k of local training samples of a task.

        Parameters
        ----------
        t : int
            The task index.

        Returns
        -------
        int
            The local sample count.
        """

        return len(self.shards[t][1])

    def reset_buffers(self, task: int) -> None:
        """Replace every activation buffer with an empty one.

        Parameters
        ----------
        task : int
            The task the buffers will capture, keying the reservoir streams.
        """

        d = self.memories.dim
        cap = self.memory_config.activation_cap
        self.buffers = {
            (layer, p): ActivationBuffer(
                layer,
                p,
                d,
                cap,
                derive_rng(
                    self.seed, Stream.RESERVOIR, self.client_id, task, layer, i
                ),
            )
            for layer in range(self.memories.num_layers)
            for i, p in enumerate(Projection)
        }

    def capture(self, model: ModelState, batch: np.ndarray) -> None:
        """Offer a batch's projection inputs to the buffers.

        Parameters
        ----------
        model : ModelState
            The model producing the activations.
        batch : np.ndarray
            The inputs.
        """

        _, inputs = forward(model, batch, capture=True)
        for layer, tokens in enumerate(inputs or ()):
            for p in Projection:
                self.buffers[(layer, p)].offer(tokens)


@dataclass(frozen=True)
class RoundRecord:
    """The participants and local epoch losses of one round."""

    task: int
    round: int
    participants: tuple[int, ...]
    losses: dict[int, tuple[float, ...]]

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "participants": list(self.participants),
            "losses": {str(k): list(v) for k, v in sorted(self.losses.items())},
        }


@dataclass(frozen=True)
class TaskReport:
    """The outcome of one task."""

    task: int
    rounds: tuple[RoundRecord, ...]
    accuracy: tuple[float, ...]
    memory_dims: dict[str, list[int]]
    repaired_bases: int

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "rounds": [r.to_dict() for r in self.rounds],
            "accuracy": list(self.accuracy),
            "memory_dims": self.memory_dims,
            "repaired_bases": self.repaired_bases,
        }


@dataclass(eq=False)
class ServerState:
    """The orchestrating server.

    The global model is the only model ever evaluated.
    """

    model: ModelState
    schedule: TaskSchedule
    test_samples: np.ndarray
    test_labels: np.ndarray
    accuracy: AccuracyMatrix
    ledger: CommLedger = field(default_factory=CommLedger)
    next_bases: Bases | None = None
    round_log: list[RoundRecord] = field(default_factory=list)


def _copy_model(model: ModelState) -> ModelState:
    adapters = None
    if model.adapters is not None:
        adapters = tuple(
            LayerAdapters(
                key=LoraAdapter(a=layer.key.a, b=layer.key.b.copy()),
                value=LoraAdapter(a=layer.value.a, b=layer.value.b.copy()),
            )
            for layer in model.adapters
        )

    return dataclasses.replace(
        model,
        merged_k=tuple(m.copy() for m in model.merged_k),
        merged_v=tuple(m.copy() for m in model.merged_v),
        adapters=adapters,
        head=model.head.copy(),
    )


def broadcast(
    server: ServerState, client_ids: Sequence[int]
) -> dict[int, ModelState]:
    """Issue replicas of the global model.

    Parameters
    ----------
    server : ServerState
        The server.
    client_ids : Sequence[int]
        The selected clients.

    Returns
    -------
    dict[int, ModelState]
        A bit-equal replica per client. The frozen backbone and adapter bases
        are shared read-only; every trainable or merged tensor is a copy.
    """

    return {k: _copy_model(server.model) for k in client_ids}


def _train_epochs(
    model: ModelState,
    optimizer: OptimizerState,
    x: np.ndarray,
    y: np.ndarray,
    cfg: RoundConfig,
    rng: np.random.Generator,
    on_final_batch=None,
) -> tuple[ModelState, list[float]]:
    """Run E epochs of minibatch AdamW, shuffling with `rng` every epoch."""

    losses = []
    n = len(y)

    for epoch in range(cfg.local_epochs):
        final = epoch == cfg.local_epochs - 1
        order = rng.permutation(n)
        total = 0.0

        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if final and on_final_batch is not None:
                on_final_batch(model, x[idx])

            grads = loss_and_grads(model, x[idx], y[idx])
            model, optimizer = apply_adamw(model, grads, optimizer)
            total += grads.loss * len(idx)

        losses.append(total / n)
        logger.debug("epoch %d: mean loss %.6f", epoch, losses[-1])

    return model, losses


def local_train(
    client: ClientState, cfg: RoundConfig, task: int, round: int
) -> AdapterUpdate | None:
    """Train a client's replica on its shard of the active task.

    Parameters
    ----------
    client : ClientState
        The client, holding a fresh replica.
    cfg : RoundConfig
        The round settings.
    task, round : int
        The 0-based task and round indices.

    Returns
    -------
    AdapterUpdate | None
        The trained B matrices, current-task head rows and n_k, or `None` when
        the shard is empty and the client sits the round out.

    Raises
    ------
    StateError
        If the client holds no replica.
    """

    if client.model is None:
        raise StateError(f"Client {client.client_id} holds no model replica.")

    x, y = client.shards[task]
    if len(y) == 0:
        logger.warning(
            "client %d has no samples in task %d, skipping", client.client_id, task
        )
        return None

    rng = derive_rng(client.seed, Stream.CLIENT, client.client_id, task, round)
    client.reset_buffers(task)
    model, losses = _train_epochs(
        client.model,
        client.optimizer,
        x,
        y,
        cfg,
        rng,
        on_final_batch=lambda m, batch: client.capture(m, batch),
    )

    client.model = model
    client.last_losses = losses
    start, stop = model.active_classes

    return AdapterUpdate(
        client_id=client.client_id,
        b_k=tuple(layer.key.b for layer in model.adapters or ()),
        b_v=tuple(layer.value.b for layer in model.adapters or ()),
        head_rows=model.head[start:stop].copy(),
        n_k=len(y),
    )


def calibrate(
    client: ClientState, model: ModelState, task: int, batch_size: int
) -> None:
    """Fill a client's buffers with a forward-only pass over a task shard.

    Parameters
    ----------
    client : ClientState
        The client.
    model : ModelState
        The model producing the activations.
    task : int
        The task whose shard is passed through.
    batch_size : int
        The forward batch size.
    """

    x, _ = client.shards[task]
    client.reset_buffers(task)
    for start in range(0, len(x), batch_size):
        client.capture(model, x[start : start + batch_size])


def absorb_memories(client: ClientState) -> None:
    """Grow every memory of a client with its buffered activations.

    Parameters
    ----------
    client : ClientState
        The client, with populated buffers.
    """

    for key in client.memories.keys():
        mem = update_memory(
            client.memories[key], client.buffers[key], client.memory_config
        )
        logger.debug(
            "client %d layer %d %s: memory dimension %d",
            client.client_id, key[0], key[1].value, mem.memory_dim,
        )
        client.memories[key] = mem


def client_next_A(
    client: ClientState, r: int, *, update: bool = True, task: int = 0
) -> BasisCandidate:
    """Propose adapter bases orthogonal to the client's memory.

    A projection whose activations span fewer than r directions is completed
    with directions drawn from the client's repair stream.

    Parameters
    ----------
    client : ClientState
        The client, with buffers from its final local epoch.
    r : int
        The adapter rank.
    update : bool, optional
        Whether to grow the memories with the buffers first, by default True.
    task : int, optional
        The task the buffers were captured in, for n_k, by default 0.

    Returns
    -------
    BasisCandidate
        One (A_K, A_V) pair per layer. The buffers are cleared.

    Raises
    ------
    CapacityError
        If a memory has fewer than r free dimensions, naming the layer and
        projection.
    """

    if update:
        absorb_memories(client)

    bases = []
    for layer in range(client.memories.num_layers):
        pair = []
        for i, p in enumerate(Projection):
            fill = derive_rng(
                client.seed, Stream.REPAIR, client.client_id, task, layer, i
            )
            try:
                a = select_adapter_basis(
                    client.memories[(layer, p)],
                    client.buffers[(layer, p)],
                    r,
                    fill=fill,
                )
            except CapacityError as exc:
                raise CapacityError(
                    f"client {client.client_id}: {exc}", layer=layer, projection=p.value
                ) from exc
            pair.append(a)
        bases.append((pair[0], pair[1]))

    client.buffers = {}

    return BasisCandidate(
        client_id=client.client_id, bases=tuple(bases), n_k=client.sample_count(task)
    )


def aggregate_B(updates: Sequence[AdapterUpdate]) -> AggregatedAdapters:
    """Average the client updates weighted by their sample counts.

    Parameters
    ----------
    updates : Sequence[AdapterUpdate]
        At least one update.

    Returns
    -------
    AggregatedAdapters
        `sum_k n_k / sum_j n_j * X_k` for every B and the head rows, summed in
        ascending client id.

    Raises
    ------
    StateError
        If there are no updates.
    ProtocolError
        If an update's shapes differ from the first one's.
    """

    if not updates:
        raise StateError("There are no client updates to aggregate.")

    ordered = sorted(updates, key=lambda u: u.client_id)
    ref = ordered[0]
    for u in ordered:
        shapes = [b.shape for b in u.b_k + u.b_v] + [u.head_rows.shape]
        expected = [b.shape for b in ref.b_k + ref.b_v] + [ref.head_rows.shape]
        if shapes != expected:
            raise ProtocolError(
                f"update shapes {shapes} do not match {expected}", u.client_id
            )

    total = sum(u.n_k for u in ordered)
    weights = [u.n_k / total for u in ordered]

    def mean(tensors: list[np.ndarray]) -> np.ndarray:
        acc = weights[0] * tensors[0]
        for w, t in zip(weights[1:], tensors[1:]):
            acc = acc + w * t
        return acc

    layers = len(ref.b_k)
    return AggregatedAdapters(
        b_k=tuple(mean([u.b_k[i] for u in ordered]) for i in range(layers)),
        b_v=tuple(mean([u.b_v[i] for u in ordered]) for i in range(layers)),
        head_rows=mean([u.head_rows for u in ordered]),
        total_samples=total,
    )


def _repair_basis(mean: DenseMatrix, rng: np.random.Generator) -> DenseMatrix:
    """Gram-Schmidt over the columns, replacing dependent ones by seeded
    directions from the complement of the accumulated columns."""

    d, r = mean.shape
    q = np.zeros((d, 0))

    for j in range(r):
        v = mean[:, j].copy()
        for _ in range(2):
            v -= q @ (q.T @ v)
        norm = np.linalg.norm(v)

        while norm <= RANK_TOL:
            v = rng.standard_normal(d)
            for _ in range(2):
                v -= q @ (q.T @ v)
            norm = np.linalg.norm(v)

        q = np.column_stack([q, v / norm])

    return fix_signs(q)[0]


def aggregate_A(
    candidates: Sequence[BasisCandidate],
    *,
    weighted: bool = False,
    seed: int = 0,
    task: int = 0,
) -> tuple[Bases, int]:
    """Average the candidate bases and restore orthonormal columns.

    Parameters
    ----------
    candidates : Sequence[BasisCandidate]
        At least one candidate.
    weighted : bool, optional
        Whether to weight by n_k instead of a plain mean, by default False.
    seed : int, optional
        The experiment seed driving rank repair, by default 0.
    task : int, optional
        The task the bases are for, keying the repair stream, by default 0.

    Returns
    -------
    tuple[Bases, int]
        The unified bases and the number of rank repairs. A single candidate
        is returned as is.

    Raises
    ------
    StateError
        If there are no candidates.
    ProtocolError
        If a candidate's shapes differ from the first one's.
    """

    if not candidates:
        raise StateError("There are no basis candidates to aggregate.")

    ordered = sorted(candidates, key=lambda c: c.client_id)
    ref = ordered[0]
    expected = [a.shape for pair in ref.bases for a in pair]
    for c in ordered:
        shapes = [a.shape for pair in c.bases for a in pair]
        if shapes != expected:
            raise ProtocolError(
                f"basis shapes {shapes} do not match {expected}", c.client_id
            )

    if len(ordered) == 1:
        return ref.bases, 0

    if weighted:
        total = sum(c.n_k for c in ordered)
        weights = [c.n_k / total for c in ordered]
    else:
        weights = [1 / len(ordered)] * len(ordered)

    repairs = 0
    bases = []
    for layer in range(len(ref.bases)):
        pair = []
        for i, p in enumerate(Projection):
            mean = weights[0] * ordered[0].bases[layer][i]
            for w, c in zip(weights[1:], ordered[1:]):
                mean = mean + w * c.bases[layer][i]

            try:
                a = qr_orthonormalize(mean)
            except RankError:
                rng = derive_rng(seed, Stream.REPAIR, task, layer, i)
                a = _repair_basis(mean, rng)
                repairs += 1
                logger.warning(
                    "task %d layer %d %s: averaged basis is rank deficient, "
                    "repaired with seeded complement directions",
                    task, layer, p.value,
                )
            pair.append(a)
        bases.append((pair[0], pair[1]))

    return tuple(bases), repairs


def _record_round(
    server: ServerState, task: int, round: int, client_id: int, rank: int
) -> None:
    cfg = server.model.backbone.config
    start, stop = server.model.active_classes
    server.ledger.add(
        CommRecord(
            task,
            round,
            client_id,
            CommKind.ROUND,
            round_upload(cfg.num_layers, cfg.embed_dim, rank, stop - start),
            round_download(cfg.num_layers, cfg.embed_dim, rank, stop),
        )
    )


def _record_bases(
    server: ServerState, task: int, kind: CommKind, candidates: list[BasisCandidate]
) -> None:
    cfg = server.model.backbone.config
    for c in candidates:
        rank = c.bases[0][0].shape[1]
        server.ledger.add(
            CommRecord(
                task,
                -1,
                c.client_id,
                kind,
                basis_upload(cfg.num_layers, cfg.embed_dim, rank),
                0,
            )
        )


def _map(executor: Executor | None, fn, items: list) -> list:
    if executor is None:
        return [fn(item) for item in items]

    return list(executor.map(fn, items))


def _memory_dims(clients: Sequence[ClientState]) -> dict[str, list[int]]:
    if not clients:
        return {}

    return {
        f"layer{layer}.{p.value}": [c.memories[(layer, p)].memory_dim for c in clients]
        for layer, p in clients[0].memories.keys()
    }


def _bootstrap_bases(
    server: ServerState,
    clients: Sequence[ClientState],
    config: ExperimentConfig,
    executor: Executor | None,
) -> Bases:
    """The bases of the first task, from a calibration pass over its shards."""

    active = [c for c in clients if c.sample_count(0) > 0]

    def propose(client: ClientState) -> BasisCandidate:
        calibrate(client, server.model, 0, config.round.batch_size)
        return client_next_A(client, config.rank, update=False, task=0)

    candidates = _map(executor, propose, active)
    _record_bases(server, 0, CommKind.CALIBRATION, candidates)
    bases, _ = aggregate_A(
        candidates, weighted=config.weighted_a_avg, seed=config.seed, task=0
    )

    return bases


def run_task(
    server: ServerState,
    clients: Sequence[ClientState],
    t: int,
    config: ExperimentConfig,
    executor: Executor | None = None,
) -> TaskReport:
    """Run every round of a task, merge, and prepare the next task's bases.

    Parameters
    ----------
    server : ServerState
        The server.
    clients : Sequence[ClientState]
        Every client, indexed by client id.
    t : int
        The 0-based task index.
    config : ExperimentConfig
        The experiment settings.
    executor : Executor | None, optional
        Runs client work in parallel, by default None, which means
        sequentially.

    Returns
    -------
    TaskReport
        The round losses, the accuracy row of task t and the memory
        dimensions.
    """

    cfg = config.round
    schedule = server.schedule
    rank = config.rank
    last_task = t == schedule.num_tasks - 1

    if server.next_bases is None:
        if config.random_a:
            rng = derive_rng(config.seed, Stream.RANDOM_A, t)
            server.next_bases = random_bases(server.model.backbone.config, rank, rng)
        else:
            server.next_bases = _bootstrap_bases(server, clients, config, executor)

    start, stop = schedule.task_range(t)
    logger.info("task %d: classes %s", t, list(schedule.tasks[t]))
    server.model = begin_task(server.model, server.next_bases, stop - start)
    server.next_bases = None

    rounds = []
    for rnd in range(cfg.rounds_per_task):
        selected = select_clients(
            cfg.num_clients, cfg.participation, config.seed, t, rnd
        )
        for k, replica in broadcast(server, selected).items():
            clients[k].model = replica
            _record_round(server, t, rnd, k, rank)

        results = _map(
            executor,
            lambda k: local_train(clients[k], cfg, t, rnd),
            selected,
        )
        updates = [u for u in results if u is not None]
        if not updates:
            raise StateError(f"No client trained in task {t} round {rnd}.")

        agg = aggregate_B(updates)
        server.model = replace_trainables(server.model, agg.b_k, agg.b_v, agg.head_rows)

        record = RoundRecord(
            task=t,
            round=rnd,
            participants=tuple(u.client_id for u in updates),
            losses={
                u.client_id: tuple(clients[u.client_id].last_losses) for u in updates
            },
        )
        server.round_log.append(record)
        rounds.append(record)

    server.model = merge_current_task(server.model)

    repairs = 0
    if not config.random_a:
        active = [c for c in clients if c.sample_count(t) > 0]
        for c in active:
            if not c.buffers:
                calibrate(c, server.model, t, cfg.batch_size)

        if last_task:
            if not config.no_memory_update:
                _map(executor, absorb_memories, active)
        else:
            candidates = _map(
                executor,
                lambda c: client_next_A(
                    c, rank, update=not config.no_memory_update, task=t
                ),
                active,
            )
            _record_bases(server, t, CommKind.BASIS, candidates)
            server.next_bases, repairs = aggregate_A(
                candidates, weighted=config.weighted_a_avg, seed=config.seed, task=t + 1
            )
    elif not last_task:
        rng = derive_rng(config.seed, Stream.RANDOM_A, t + 1)
        server.next_bases = random_bases(server.model.backbone.config, rank, rng)

    row = evaluate(server.model, schedule, server.test_samples, server.test_labels, t)
    server.accuracy.add_row(row)
    logger.info("task %d: accuracy %s", t, " ".join(f"{a:.4f}" for a in row))

    return TaskReport(
        task=t,
        rounds=tuple(rounds),
        accuracy=row,
        memory_dims=_memory_dims(clients),
        repaired_bases=repairs,
    )


@dataclass(eq=False)
class ExperimentReport:
    """The outcome of an experiment.

    `to_json` covers everything but the wall-clock timings and the final
    states, so two runs of the same config give byte-identical documents.
    """

    config: dict
    seeds: dict[str, int]
    tasks: list[TaskReport]
    accuracy: AccuracyMatrix
    ledger: CommLedger
    timings: dict[str, float] = field(default_factory=dict)
    model: ModelState | None = None
    clients: list[ClientState] = field(default_factory=list)
    mode: str = "federated"

    @property
    def faa(self) -> float:
        return faa(self.accuracy)

    def to_dict(self) -> dict:
        return {
            "version": __VERSION__,
            "mode": self.mode,
            "config": self.config,
            "seeds": self.seeds,
            "tasks": [t.to_dict() for t in self.tasks],
            "accuracy_matrix": [list(row) for row in self.accuracy.rows],
            "faa": self.faa,
            "forgetting": forgetting(self.accuracy),
            "backward_transfer": backward_transfer(self.accuracy),
            "average_incremental_accuracy": average_incremental_accuracy(
                self.accuracy
            ),
            "communication": self.ledger.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_dataset(config: ExperimentConfig) -> Dataset:
    """Build the experiment's dataset.

    Parameters
    ----------
    config : ExperimentConfig
        The experiment settings.

    Returns
    -------
    Dataset
        The ingested raster dataset when `ingest_path` is set, otherwise the
        synthetic dataset.

    Raises
    ------
    ConfigError
        If the samples do not match the backbone's input dimension.
    """

    if config.ingest_path:
        dataset = ingest_raster(config.ingest_path, config.ingest_format)
    else:
        dataset = generate_synthetic(
            config.data, seed=derive_seed(config.seed, Stream.DATA)
        )

    if dataset.input_dim != config.backbone.input_dim:
        raise ConfigError(
            f"Samples have dimension {dataset.input_dim}, the backbone expects "
            f"{config.backbone.input_dim}."
        )

    return dataset


def _seeds(config: ExperimentConfig) -> dict[str, int]:
    return {
        "experiment": config.seed,
        "data": config.data.seed
        if config.data.seed is not None
        else derive_seed(config.seed, Stream.DATA),
        "schedule": derive_seed(config.seed, Stream.SCHEDULE),
        "partition": derive_seed(config.seed, Stream.PARTITION),
        "backbone": derive_seed(config.seed, Stream.BACKBONE),
    }


def _optimizer(config: ExperimentConfig) -> OptimizerState:
    return OptimizerState(
        lr_adapter=config.lr_adapter,
        lr_head=config.lr_head,
        weight_decay=config.weight_decay,
    )


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Run a federated class-incremental experiment.

    Parameters
    ----------
    config : ExperimentConfig
        The experiment settings.
    threads : int, optional
        The number of worker threads for client work, by default 1. Results
        do not depend on it.

    Returns
    -------
    ExperimentReport
        The accuracy matrix, per-task reports, communication ledger and the
        final global model and client states.
    """

    began = time.perf_counter()
    seeds = _seeds(config)
    cfg = config.round

    dataset = load_dataset(config)
    dataset.check_clients(cfg.num_clients)
    schedule = build_schedule(dataset, config.num_tasks, seeds["schedule"])
    train_x, train_y = dataset.train()
    test_x, test_y = dataset.test()

    plan = dirichlet_partition(
        train_y, cfg.num_clients, config.beta, seeds["partition"], tasks=schedule.tasks
    )
    backbone = init_backbone(config.backbone, seeds["backbone"])

    clients = [
        ClientState(
            client_id=k,
            shards=tuple(
                (train_x[idx], schedule.positions(train_y[idx]))
                for idx in (plan.shards[t][k] for t in range(schedule.num_tasks))
            ),
            memories=MemoryBank(config.backbone.embed_dim, config.backbone.num_layers),
            memory_config=config.memory,
            optimizer=_optimizer(config),
            seed=config.seed,
        )
        for k in range(cfg.num_clients)
    ]
    server = ServerState(
        model=ModelState.initial(backbone),
        schedule=schedule,
        test_samples=test_x,
        test_labels=test_y,
        accuracy=AccuracyMatrix(schedule.num_tasks),
    )
    prepared = time.perf_counter()

    tasks = []
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(schedule.num_tasks):
            tasks.append(run_task(server, clients, t, config, executor))
    finally:
        if executor is not None:
            executor.shutdown()

    finished = time.perf_counter()
    logger.info("final average accuracy %.4f", faa(server.accuracy))

    return ExperimentReport(
        config=config.to_dict(),
        seeds=seeds,
        tasks=tasks,
        accuracy=server.accuracy,
        ledger=server.ledger,
        timings={
            "prepare_seconds": prepared - began,
            "train_seconds": finished - prepared,
            "total_seconds": finished - began,
        },
        model=server.model,
        clients=clients,
    )


def run_centralized(config: ExperimentConfig) -> ExperimentReport:
    """Train one learner sequentially on every task's full training split.

    The learner draws its randomness as client 0 of a single-client
    federation and runs the same training and memory steps, with no server
    averaging.

    Parameters
    ----------
    config : ExperimentConfig
        The experiment settings. The round's client count and participation
        are ignored.

    Returns
    -------
    ExperimentReport
        The report, with an empty communication ledger.
    """

    began = time.perf_counter()
    seeds = _seeds(config)
    cfg = config.round

    dataset = load_dataset(config)
    schedule = build_schedule(dataset, config.num_tasks, seeds["schedule"])
    train_x, train_y = dataset.train()
    test_x, test_y = dataset.test()

    learner = ClientState(
        client_id=0,
        shards=tuple(
            (train_x[mask], schedule.positions(train_y[mask]))
            for mask in (np.isin(train_y, task) for task in schedule.tasks)
        ),
        memories=MemoryBank(config.backbone.embed_dim, config.backbone.num_layers),
        memory_config=config.memory,
        optimizer=_optimizer(config),
        seed=config.seed,
    )
    model = ModelState.initial(init_backbone(config.backbone, seeds["backbone"]))
    accuracy = AccuracyMatrix(schedule.num_tasks)
    tasks = []

    if config.random_a:
        bases = random_bases(
            config.backbone, config.rank, derive_rng(config.seed, Stream.RANDOM_A, 0)
        )
    else:
        calibrate(learner, model, 0, cfg.batch_size)
        bases = client_next_A(learner, config.rank, update=False, task=0).bases

    for t in range(schedule.num_tasks):
        start, stop = schedule.task_range(t)
        model = begin_task(model, bases, stop - start)
        x, y = learner.shards[t]

        losses: dict[int, tuple[float, ...]] = {}
        for rnd in range(cfg.rounds_per_task):
            learner.reset_buffers(t)
            rng = derive_rng(config.seed, Stream.CLIENT, 0, t, rnd)
            model, epoch_losses = _train_epochs(
                model,
                learner.optimizer,
                x,
                y,
                cfg,
                rng,
                on_final_batch=learner.capture,
            )
            losses[rnd] = tuple(epoch_losses)

        model = merge_current_task(model)

        if config.random_a:
            bases = random_bases(
                config.backbone,
                config.rank,
                derive_rng(config.seed, Stream.RANDOM_A, t + 1),
            )
        elif t == schedule.num_tasks - 1:
            if not config.no_memory_update:
                absorb_memories(learner)
        else:
            bases = client_next_A(
                learner, config.rank, update=not config.no_memory_update, task=t
            ).bases

        row = evaluate(model, schedule, test_x, test_y, t)
        accuracy.add_row(row)
        logger.info("task %d: accuracy %s", t, " ".join(f"{a:.4f}" for a in row))

        tasks.append(
            TaskReport(
                task=t,
                rounds=tuple(
                    RoundRecord(t, rnd, (0,), {0: losses[rnd]})
                    for rnd in range(cfg.rounds_per_task)
                ),
                accuracy=row,
                memory_dims=_memory_dims([learner]),
                repaired_bases=0,
            )
        )

    finished = time.perf_counter()

    return ExperimentReport(
        config=config.to_dict(),
        seeds=seeds,
        tasks=tasks,
        accuracy=accuracy,
        ledger=CommLedger(),
        timings={"total_seconds": finished - began},
        model=model,
        clients=[learner],
        mode="centralized",
    )


def run_seeds(
    config: ExperimentConfig, seeds: Sequence[int], threads: int = 1
) -> list[ExperimentReport]:
    """Run the same experiment under several seeds.

    Parameters
    ----------
    config : ExperimentConfig
        The experiment settings.
    seeds : Sequence[int]
        The experiment seeds.
    threads : int, optional
        The number of worker threads, by default 1.

    Returns
    -------
    list[ExperimentReport]
        One report per seed, in order.
    """

    return [
        run_experiment(dataclasses.replace(config, seed=s), threads) for s in seeds
    ]
