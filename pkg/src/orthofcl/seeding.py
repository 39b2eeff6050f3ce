"""Seed derivation.

A single experiment seed reproduces a whole run. Every random stream is
seeded by folding (stream, *keys) into the experiment seed with the
splitmix64 finalizer, so the randomness of a client in a given task and
round does not depend on how many other clients ran, or in which order.
"""

from enum import IntEnum

import numpy as np

_MASK = (1 << 64) - 1


class Stream(IntEnum):
    """The independent random streams of an experiment."""

    DATA = 1
    SCHEDULE = 2
    PARTITION = 3
    BACKBONE = 4
    CLIENT = 5
    SELECTION = 6
    REPAIR = 7
    RANDOM_A = 8
    RESERVOIR = 9


def splitmix64(z: int) -> int:
    """Apply one splitmix64 step.

    Parameters
    ----------
    z : int
        The state, taken modulo 2^64.

    Returns
    -------
    int
        The mixed 64-bit output.
    """

    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: Stream, *keys: int) -> int:
    """Derive the seed of a random stream.

    Parameters
    ----------
    seed : int
        The experiment seed.
    stream : Stream
        The stream.
    *keys : int
        Further keys, e.g. client id, task and round.

    Returns
    -------
    int
        A 64-bit seed.
    """

    z = splitmix64(seed & _MASK)
    for key in (int(stream), *keys):
        z = splitmix64(z ^ (int(key) & _MASK))

    return z


def derive_rng(seed: int, stream: Stream, *keys: int) -> np.random.Generator:
    """Create the generator of a random stream.

    Parameters
    ----------
    seed : int
        The experiment seed.
    stream : Stream
        The stream.
    *keys : int
        Further keys.

    Returns
    -------
    numpy.random.Generator
        The generator seeded by `derive_seed`.
    """

    return np.random.default_rng(derive_seed(seed, stream, *keys))


def select_clients(
    num_clients: int, participation: float, seed: int, task: int, round: int
) -> list[int]:
    """Pick the clients taking part in a round.

    Parameters
    ----------
    num_clients : int
        The number of clients K.
    participation : float
        The participating fraction, in (0, 1].
    seed : int
        The experiment seed.
    task : int
        The 0-based task index.
    round : int
        The 0-based round index within the task.

    Returns
    -------
    list[int]
        `max(1, round(participation * K))` ascending client ids; every
        client under full participation.
    """

    count = max(1, round_half_up(participation * num_clients))
    if count >= num_clients:
        return list(range(num_clients))

    rng = derive_rng(seed, Stream.SELECTION, task, round)
    chosen = rng.choice(num_clients, size=count, replace=False)

    return sorted(int(c) for c in chosen)


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves up.

    Parameters
    ----------
    x : float
        The value.

    Returns
    -------
    int
        The rounded value.
    """

    return int(np.floor(x + 0.5))
