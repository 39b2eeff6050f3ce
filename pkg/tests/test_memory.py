import logging

import numpy as np
import pytest
import scipy.linalg

from orthofcl.errors import CapacityError, ConfigError, DataError, RankError
from orthofcl.memory import (
    ActivationBuffer,
    MemoryBank,
    MemoryConfig,
    Projection,
    StoredSide,
    SubspaceMemory,
    check_memory,
    effective_gradient_basis,
    memory_init,
    select_adapter_basis,
    update_memory,
)


def _basis(d: int, *axes: int) -> np.ndarray:
    return np.eye(d)[:, list(axes)]


def _memory(d: int, *axes: int) -> SubspaceMemory:
    return SubspaceMemory(d, StoredSide.GRADIENT_SPACE, _basis(d, *axes), len(axes))


def _max_angle(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(scipy.linalg.subspace_angles(a, b)))


def test_memory_init() -> None:
    mem = memory_init(8)
    assert mem.basis.shape == (8, 0)
    assert mem.memory_dim == 0
    assert mem.free_dim == 8
    assert check_memory(mem)

    assert memory_init(1).memory_dim == 0

    with pytest.raises(ConfigError):
        memory_init(0)


def test_memory_config() -> None:
    with pytest.raises(ConfigError):
        MemoryConfig(energy_threshold=1.0)

    with pytest.raises(ConfigError):
        MemoryConfig(rank=0)


def test_select_adapter_basis_dominant_plane() -> None:
    rng = np.random.default_rng(0)
    h = _basis(4, 0, 1) @ rng.standard_normal((2, 20))

    a = select_adapter_basis(memory_init(4), h, 2)

    assert a.shape == (4, 2)
    assert _max_angle(a, _basis(4, 0, 1)) <= 1e-8


def test_select_adapter_basis_removes_memory() -> None:
    h = np.array([[1.0, 2.0, -1.0], [1.0, -3.0, 2.0], [0.0, 0.0, 0.0]])

    a = select_adapter_basis(_memory(3, 0), h, 1)

    assert np.abs(a[:, 0]) == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)


def test_select_adapter_basis_oracle() -> None:
    rng = np.random.default_rng(3)
    m = scipy.linalg.qr(rng.standard_normal((8, 2)), mode="economic")[0]
    mem = SubspaceMemory(8, StoredSide.GRADIENT_SPACE, m, 2)
    h = rng.standard_normal((8, 30))

    a = select_adapter_basis(mem, h, 3)

    assert np.linalg.norm(m.T @ a) <= 1e-8
    assert np.linalg.norm(a.T @ a - np.eye(3)) <= 1e-10

    u = np.linalg.svd((np.eye(8) - m @ m.T) @ h)[0][:, :3]
    assert _max_angle(a, u) <= 1e-8


def test_select_adapter_basis_errors() -> None:
    h = np.ones((4, 3))

    with pytest.raises(CapacityError):
        select_adapter_basis(_memory(4, 0, 1, 2), h, 2)

    with pytest.raises(RankError) as excinfo:
        select_adapter_basis(memory_init(4), h, 2)
    assert excinfo.value.column == 1

    with pytest.raises(DataError):
        select_adapter_basis(memory_init(4), np.zeros((4, 0)), 1)

    with pytest.raises(DataError):
        select_adapter_basis(memory_init(4), np.ones((3, 2)), 1)


def test_select_adapter_basis_fill(caplog: pytest.LogCaptureFixture) -> None:
    mem = _memory(6, 0)
    h = _basis(6, 0, 1) @ np.array([[1.0, 2.0, 3.0], [1.0, -1.0, 0.5]])

    with caplog.at_level(logging.WARNING, logger="orthofcl.memory"):
        a = select_adapter_basis(mem, h, 3, fill=np.random.default_rng(1))

    assert "rank 1 < 3" in caplog.text
    assert a.shape == (6, 3)
    assert np.linalg.norm(a.T @ a - np.eye(3)) <= 1e-10
    assert np.linalg.norm(mem.basis.T @ a) <= 1e-8
    assert _max_angle(a[:, :1], _basis(6, 1)) <= 1e-8

    again = select_adapter_basis(mem, h, 3, fill=np.random.default_rng(1))
    assert np.array_equal(a, again)


def test_update_memory_single_direction() -> None:
    rng = np.random.default_rng(5)
    h = np.zeros((4, 50))
    h[0] = 1.0
    h += 1e-12 * rng.standard_normal(h.shape)

    mem = update_memory(memory_init(4), h, MemoryConfig(energy_threshold=0.95))

    assert mem.memory_dim == 1
    assert np.abs(mem.basis[:, 0]) == pytest.approx([1.0, 0.0, 0.0, 0.0], abs=1e-8)
    assert check_memory(mem)


def test_update_memory_covered() -> None:
    mem = _memory(4, 0, 1)
    h = _basis(4, 0, 1) @ np.ones((2, 5))

    assert update_memory(mem, h, MemoryConfig()) is mem


def test_update_memory_dual_switch() -> None:
    cfg = MemoryConfig(energy_threshold=0.99)
    rng = np.random.default_rng(11)
    mem = memory_init(6)
    dims, sides = [], []

    for pair in ((0, 1), (2, 3), (4, 5)):
        h = _basis(6, *pair) @ rng.standard_normal((2, 40))
        before = effective_gradient_basis(mem)
        mem = update_memory(mem, h, cfg)
        dims.append(mem.memory_dim)
        sides.append(mem.stored_side)

        assert check_memory(mem)
        # the old projector is kept across a representation switch
        after = effective_gradient_basis(mem)
        if before.shape[1]:
            assert np.linalg.norm(after @ after.T @ before - before) <= 1e-8

    assert dims == [2, 4, 6]
    assert sides[0] is StoredSide.GRADIENT_SPACE
    assert sides[1] is StoredSide.COMPLEMENT
    assert mem.saturated


def test_update_memory_energy_criterion() -> None:
    rng = np.random.default_rng(2)
    cfg = MemoryConfig(energy_threshold=0.9)
    mem = memory_init(10)

    for _ in range(3):
        h = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 25))
        h += 0.05 * rng.standard_normal(h.shape)
        old = mem.memory_dim
        mem = update_memory(mem, h, cfg)

        m = effective_gradient_basis(mem)
        covered = np.sum((m.T @ h) ** 2) / np.sum(h**2)
        assert mem.memory_dim >= old
        if mem.memory_dim < 10:
            assert covered >= 0.9 - 1e-12


def test_effective_gradient_basis_complement() -> None:
    mem = SubspaceMemory(8, StoredSide.COMPLEMENT, _basis(8, *range(2, 8)), 2)

    m = effective_gradient_basis(mem)

    assert m.shape == (8, 2)
    assert _max_angle(m, _basis(8, 0, 1)) <= 1e-8

    stored = _memory(8, 0, 3)
    assert effective_gradient_basis(stored) is stored.basis


def test_activation_buffer() -> None:
    buf = ActivationBuffer(0, Projection.KEY, 3, 4, np.random.default_rng(0))
    buf.offer(np.ones((3, 3)))

    assert len(buf) == 3
    assert buf.samples.shape == (3, 3)

    buf.offer(np.arange(18.0).reshape(6, 3))
    assert len(buf) == 4
    assert buf.seen == 9

    with pytest.raises(DataError):
        buf.offer([[np.inf, 0.0, 0.0]])

    buf.clear()
    assert len(buf) == 0


def test_memory_bank() -> None:
    bank = MemoryBank(4, 2)

    assert bank.keys() == [
        (0, Projection.KEY),
        (0, Projection.VALUE),
        (1, Projection.KEY),
        (1, Projection.VALUE),
    ]
    assert all(bank[key].memory_dim == 0 for key in bank.keys())
