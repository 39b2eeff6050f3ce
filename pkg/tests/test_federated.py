import logging

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from orthofcl.config import ExperimentConfig
from orthofcl.data import SyntheticConfig, TaskSchedule
from orthofcl.errors import ConfigError, ProtocolError, StateError
from orthofcl.federated import (
    AdapterUpdate,
    BasisCandidate,
    ClientState,
    RoundConfig,
    ServerState,
    aggregate_A,
    aggregate_B,
    broadcast,
    calibrate,
    client_next_A,
    load_dataset,
    local_train,
    run_centralized,
    run_experiment,
    run_seeds,
)
from orthofcl.memory import MemoryBank, MemoryConfig, effective_gradient_basis
from orthofcl.metrics import AccuracyMatrix, CommKind
from orthofcl.model import (
    BackboneConfig,
    ModelState,
    OptimizerState,
    begin_task,
    init_backbone,
    random_bases,
)

BACKBONE = BackboneConfig(embed_dim=16, num_layers=2, num_tokens=5, input_dim=8)


def small_config(**changes) -> ExperimentConfig:
    config = ExperimentConfig(
        backbone=BACKBONE,
        memory=MemoryConfig(rank=2, activation_cap=64),
        round=RoundConfig(num_clients=2, local_epochs=2, batch_size=8),
        data=SyntheticConfig(num_classes=6, samples_per_class=20, input_dim=8),
        num_tasks=3,
        beta=1.0,
    )
    return config.replace(**changes)


def _update(client_id: int, value: float, n_k: int) -> AdapterUpdate:
    x = np.array([[value]])
    return AdapterUpdate(client_id, (x,), (2 * x,), x.copy(), n_k)


def _candidate(client_id: int, *columns: list[float]) -> BasisCandidate:
    a = np.array(columns, dtype=np.float64).T
    return BasisCandidate(client_id, ((a, a.copy()),), 1)


def _client(
    client_id: int,
    model: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    lr: float = 1e-2,
) -> ClientState:
    return ClientState(
        client_id=client_id,
        shards=((x, y),),
        memories=MemoryBank(BACKBONE.embed_dim, BACKBONE.num_layers),
        memory_config=MemoryConfig(activation_cap=64),
        optimizer=OptimizerState(lr_adapter=lr, lr_head=lr),
        seed=0,
        model=model,
    )


@pytest.fixture
def model() -> ModelState:
    rng = np.random.default_rng(0)
    initial = ModelState.initial(init_backbone(BACKBONE, 0))
    return begin_task(initial, random_bases(BACKBONE, 2, rng), 2)


@pytest.fixture
def shard() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(1)
    y = np.array([0, 1] * 10)
    x = rng.standard_normal((20, 8)) + 2.0 * y[:, None]
    return x, y


def test_round_config() -> None:
    with pytest.raises(ConfigError):
        RoundConfig(local_epochs=0)

    with pytest.raises(ConfigError):
        RoundConfig(participation=1.5)


def test_aggregate_b_weighted_mean() -> None:
    agg = aggregate_B([_update(1, 2.0, 1), _update(2, 4.0, 3)])

    assert agg.b_k[0] == pytest.approx(np.array([[3.5]]), abs=1e-15)
    assert agg.b_v[0] == pytest.approx(np.array([[7.0]]), abs=1e-15)
    assert agg.total_samples == 4


def test_aggregate_b_single_and_consensus() -> None:
    single = _update(3, 0.123, 7)
    agg = aggregate_B([single])

    assert np.array_equal(agg.b_k[0], single.b_k[0])
    assert np.array_equal(agg.head_rows, single.head_rows)

    same = aggregate_B([_update(k, 0.3, k + 1) for k in range(5)])
    assert np.max(np.abs(same.b_k[0] - 0.3)) <= 1e-15


def test_aggregate_b_order_and_linearity() -> None:
    updates = [_update(k, float(k) / 3, k + 2) for k in range(4)]
    forward_order = aggregate_B(updates)
    reverse_order = aggregate_B(updates[::-1])

    assert np.array_equal(forward_order.b_k[0], reverse_order.b_k[0])

    doubled = aggregate_B([_update(k, 2 * float(k) / 3, k + 2) for k in range(4)])
    assert np.array_equal(doubled.b_k[0], 2 * forward_order.b_k[0])


def test_aggregate_b_errors() -> None:
    with pytest.raises(StateError):
        aggregate_B([])

    bad = AdapterUpdate(5, (np.ones((2, 1)),), (np.ones((1, 1)),), np.ones((1, 1)), 1)
    with pytest.raises(ProtocolError) as excinfo:
        aggregate_B([_update(1, 1.0, 1), bad])
    assert excinfo.value.client_id == 5


def test_aggregate_a_hand_geometry() -> None:
    bases, repairs = aggregate_A([_candidate(0, [1.0, 0.0]), _candidate(1, [0.0, 1.0])])

    expected = np.array([[1.0], [1.0]]) / np.sqrt(2)
    assert bases[0][0] == pytest.approx(expected)
    assert repairs == 0


def test_aggregate_a_consensus() -> None:
    rng = np.random.default_rng(2)
    a = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    candidates = [BasisCandidate(k, ((a, a),), 1) for k in range(3)]

    bases, _ = aggregate_A(candidates)
    assert np.linalg.norm(bases[0][0] @ bases[0][0].T - a @ a.T) <= 1e-8

    assert aggregate_A(candidates[:1])[0] is candidates[0].bases


def test_aggregate_a_sign_cancellation(caplog: pytest.LogCaptureFixture) -> None:
    candidates = [_candidate(0, [1.0, 0.0, 0.0]), _candidate(1, [-1.0, 0.0, 0.0])]

    with caplog.at_level(logging.WARNING, logger="orthofcl.federated"):
        bases, repairs = aggregate_A(candidates, seed=4, task=1)

    assert repairs == 2
    assert "rank deficient" in caplog.text
    assert np.linalg.norm(bases[0][0]) == pytest.approx(1.0)
    assert np.array_equal(bases[0][0], aggregate_A(candidates, seed=4, task=1)[0][0][0])


def test_aggregate_a_errors() -> None:
    with pytest.raises(StateError):
        aggregate_A([])

    with pytest.raises(ProtocolError):
        aggregate_A([_candidate(0, [1.0, 0.0]), _candidate(1, [1.0, 0.0, 0.0])])


def test_broadcast(model: ModelState) -> None:
    server = ServerState(
        model=model,
        schedule=TaskSchedule(tasks=((0, 1),)),
        test_samples=np.zeros((0, 8)),
        test_labels=np.zeros(0, dtype=np.int64),
        accuracy=AccuracyMatrix(1),
    )

    first = broadcast(server, [0, 1, 2])
    second = broadcast(server, [0, 1, 2])

    assert sorted(first) == [0, 1, 2]
    assert {m.checksum() for m in first.values()} == {model.checksum()}
    assert first[1].checksum() == second[1].checksum()

    first[0].head[:] = 9.0
    assert not np.any(model.head == 9.0)


def test_local_train_zero_lr(model: ModelState, shard) -> None:
    client = _client(0, model, *shard, lr=0.0)
    update = local_train(client, RoundConfig(local_epochs=1), 0, 0)

    assert update is not None
    assert update.n_k == 20
    assert np.array_equal(update.b_k[0], model.adapters[0].key.b)
    assert np.array_equal(update.head_rows, model.head)
    assert set(update.to_dict()) == {"client_id", "b_k", "b_v", "head_rows", "n_k"}


def test_local_train_deterministic(model: ModelState, shard) -> None:
    cfg = RoundConfig(local_epochs=2, batch_size=4)
    a = local_train(_client(3, model, *shard), cfg, 0, 0)
    b = local_train(_client(3, model, *shard), cfg, 0, 0)

    assert a is not None and b is not None
    assert all(np.array_equal(x, y) for x, y in zip(a.b_k + a.b_v, b.b_k + b.b_v))
    assert not np.array_equal(a.head_rows, model.head)


def test_local_train_empty_shard(model: ModelState) -> None:
    client = _client(0, model, np.zeros((0, 8)), np.zeros(0, dtype=np.int64))

    assert local_train(client, RoundConfig(), 0, 0) is None

    client.model = None
    with pytest.raises(StateError):
        local_train(client, RoundConfig(), 0, 0)


def test_client_next_a_orthogonal(model: ModelState, shard) -> None:
    client = _client(1, model, *shard)
    local_train(client, RoundConfig(local_epochs=1, batch_size=5), 0, 0)

    candidate = client_next_A(client, 2)
    rng = np.random.default_rng(8)

    assert client.buffers == {}
    assert candidate.n_k == 20
    for layer, pair in enumerate(candidate.bases):
        for a, key in zip(pair, client.memories.keys()[2 * layer : 2 * layer + 2]):
            m = effective_gradient_basis(client.memories[key])
            assert m.shape[1] > 0
            assert np.linalg.norm(m.T @ a) <= 1e-8
            assert np.linalg.norm(a.T @ a - np.eye(2)) <= 1e-10

            for _ in range(10):
                delta = a @ rng.standard_normal((2, 16))
                c = m @ rng.standard_normal((m.shape[1], 16))
                inner = np.sum(delta * c)
                assert abs(inner) <= 1e-8 * np.linalg.norm(delta) * np.linalg.norm(c)


def test_client_next_a_deterministic(model: ModelState, shard) -> None:
    a, b = _client(2, model, *shard), _client(2, model, *shard)
    for c in (a, b):
        calibrate(c, model, 0, 8)

    first, second = client_next_A(a, 2), client_next_A(b, 2)
    for pa, pb in zip(first.bases, second.bases):
        assert np.array_equal(pa[0], pb[0])
        assert np.array_equal(pa[1], pb[1])


def test_client_next_a_after_coordinate_task() -> None:
    cfg = BackboneConfig(embed_dim=8, num_layers=1, num_tokens=2, input_dim=4)
    rng = np.random.default_rng(3)
    model = ModelState.initial(init_backbone(cfg, 0))
    model = begin_task(model, random_bases(cfg, 1, rng), 2)

    first = np.zeros((40, 4))
    first[:, :2] = rng.standard_normal((40, 2))
    client = ClientState(
        client_id=0,
        shards=((first, np.zeros(40, dtype=np.int64)),),
        memories=MemoryBank(8, 1),
        memory_config=MemoryConfig(energy_threshold=0.999),
        optimizer=OptimizerState(lr_adapter=0.0, lr_head=0.0),
        seed=0,
    )
    calibrate(client, model, 0, 10)
    tokens = client.buffers[client.memories.keys()[0]].samples
    candidate = client_next_A(client, 1)

    span = np.linalg.svd(tokens, full_matrices=False)[0][:, :2]
    angles = subspace_angles(span, candidate.bases[0][0])
    assert np.degrees(angles.min()) >= 89.0


def test_conservation() -> None:
    config = small_config()
    report = run_experiment(config)
    _, labels = load_dataset(config).train()

    for t in range(config.num_tasks):
        total = sum(c.sample_count(t) for c in report.clients)
        assert total == len(labels) // config.num_tasks


def test_run_experiment() -> None:
    config = small_config()
    report = run_experiment(config)

    assert report.accuracy.complete
    assert len(report.tasks) == 3
    assert [len(t.rounds) for t in report.tasks] == [1, 1, 1]
    assert 0.0 <= report.faa <= 1.0
    assert report.model is not None and report.model.adapters is None
    assert report.model.num_classes == 6

    ledger = report.ledger
    assert len(ledger.select(kind=CommKind.ROUND)) == 3 * 2
    assert len(ledger.select(kind=CommKind.CALIBRATION)) == 2
    assert len(ledger.select(kind=CommKind.BASIS)) == 2 * 2

    dims = report.tasks[-1].memory_dims
    assert set(dims) == {"layer0.key", "layer0.value", "layer1.key", "layer1.value"}
    assert all(d > 0 for values in dims.values() for d in values)

    document = report.to_dict()
    assert document["faa"] == report.faa
    assert document["seeds"]["experiment"] == 0


def test_run_experiment_deterministic() -> None:
    config = small_config(seed=5)

    first = run_experiment(config).to_json()
    assert first == run_experiment(config).to_json()
    assert first == run_experiment(config, threads=2).to_json()


def test_single_task_faa() -> None:
    report = run_experiment(small_config(num_tasks=1))

    assert report.faa == report.accuracy[0][0]


def test_separable_task_is_learned() -> None:
    config = small_config(num_tasks=1, data__cluster_spread=0.1, round__local_epochs=20)
    report = run_experiment(config)

    assert report.accuracy[0][0] >= 0.95


def test_partial_participation() -> None:
    config = small_config(
        round__num_clients=4, round__participation=0.5, round__rounds_per_task=2
    )
    report = run_experiment(config)

    for task in report.tasks:
        assert len(task.rounds) == 2
        assert all(len(r.participants) <= 2 for r in task.rounds)


def test_single_client_matches_centralized() -> None:
    config = small_config(num_tasks=2, round__num_clients=1, round__local_epochs=5)

    federated = run_experiment(config)
    centralized = run_centralized(config)

    assert federated.accuracy.rows == centralized.accuracy.rows
    assert federated.model is not None and centralized.model is not None
    assert federated.model.checksum() == centralized.model.checksum()
    assert centralized.mode == "centralized"


@pytest.mark.slow
@pytest.mark.parametrize("flag", ["random_a", "no_memory_update", "weighted_a_avg"])
def test_ablations(flag: str) -> None:
    config = small_config(
        data__cluster_spread=0.5,
        **{flag: True},
    )
    report = run_experiment(config)

    assert report.accuracy.complete
    assert 0.0 <= report.faa <= 1.0

    if flag == "random_a":
        assert report.ledger.select(kind=CommKind.BASIS) == []
    if flag == "no_memory_update":
        dims = report.tasks[-1].memory_dims
        assert all(d == 0 for values in dims.values() for d in values)


def wide_patch_config(**changes) -> ExperimentConfig:
    """Three tasks whose layer-0 tokens span at most 17 of 32 directions."""

    config = ExperimentConfig(
        backbone=BackboneConfig(
            embed_dim=32, num_layers=2, num_tokens=5, input_dim=64
        ),
        memory=MemoryConfig(rank=2, energy_threshold=0.99, activation_cap=256),
        round=RoundConfig(num_clients=2, local_epochs=8, batch_size=8),
        data=SyntheticConfig(
            num_classes=6, samples_per_class=40, input_dim=64, cluster_spread=0.02
        ),
        num_tasks=3,
        beta=1.0,
        lr_adapter=0.02,
    )
    return config.replace(**changes)


@pytest.mark.slow
def test_orthogonal_bases_beat_random() -> None:
    seeds = range(5)
    orthogonal = run_seeds(wide_patch_config(), seeds)
    random = run_seeds(wide_patch_config(random_a=True), seeds)

    orthogonal_faa = np.mean([r.faa for r in orthogonal])
    random_faa = np.mean([r.faa for r in random])
    assert orthogonal_faa > random_faa

    for report in orthogonal:
        dims = report.tasks[0].memory_dims
        assert all(0 < max(values) < 32 for values in dims.values())
