import numpy as np

from orthofcl.seeding import (
    Stream,
    derive_rng,
    derive_seed,
    round_half_up,
    select_clients,
    splitmix64,
)


def test_splitmix64() -> None:
    # first outputs of the reference generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_derive_seed() -> None:
    a = derive_seed(0, Stream.CLIENT, 3, 1, 0)

    assert a == derive_seed(0, Stream.CLIENT, 3, 1, 0)
    assert a != derive_seed(0, Stream.CLIENT, 3, 1, 1)
    assert a != derive_seed(0, Stream.SELECTION, 3, 1, 0)
    assert a != derive_seed(1, Stream.CLIENT, 3, 1, 0)
    assert 0 <= a < 2**64


def test_derive_rng() -> None:
    x = derive_rng(5, Stream.DATA).standard_normal(4)
    y = derive_rng(5, Stream.DATA).standard_normal(4)

    assert np.array_equal(x, y)


def test_select_clients() -> None:
    assert select_clients(10, 1.0, 0, 0, 0) == list(range(10))

    half = select_clients(10, 0.5, 0, 2, 1)
    assert len(half) == 5
    assert half == sorted(half)
    assert half == select_clients(10, 0.5, 0, 2, 1)

    assert len(select_clients(3, 0.01, 0, 0, 0)) == 1


def test_round_half_up() -> None:
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4) == 2
    assert round_half_up(0.5) == 1
