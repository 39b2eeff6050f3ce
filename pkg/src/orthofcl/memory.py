"""The dual gradient projection memory.

A `SubspaceMemory` keeps an orthonormal basis of the input subspace already
claimed by past tasks at one (layer, projection) pair. Whichever side is
smaller, the basis itself or its orthogonal complement, is stored. Input
activations stand in for gradients: the weight gradient of a linear
projection `W x` is a sum of outer products `g x^T`, so its row space lies in
the span of the inputs.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import numpy.typing as npt
import scipy.linalg  # type: ignore

from orthofcl.errors import CapacityError, ConfigError, DataError, RankError
from orthofcl.linalg import (
    DenseMatrix,
    as_matrix,
    fix_signs,
    is_orthonormal,
    project_complement,
    qr_orthonormalize,
    thin_svd,
)

logger = logging.getLogger(__name__)

#: Singular values at or below this are treated as zero.
SINGULAR_TOL = 1e-10


class StoredSide(str, Enum):
    """Which side of the memory the stored basis spans."""

    GRADIENT_SPACE = "gradient"
    COMPLEMENT = "complement"


class Projection(str, Enum):
    """The adapted attention projections."""

    KEY = "key"
    VALUE = "value"


@dataclass(frozen=True)
class MemoryConfig:
    """The subspace memory settings.

    Parameters
    ----------
    energy_threshold : float
        The fraction ε of activation energy the memory must cover after an
        update, in (0, 1), by default 0.95.
    activation_cap : int
        The number of token columns kept per buffer, by default 256.
    rank : int
        The adapter rank r, by default 2.
    """

    energy_threshold: float = 0.95
    activation_cap: int = 256
    rank: int = 2

    def __post_init__(self) -> None:
        if not 0 < self.energy_threshold < 1:
            raise ConfigError("The energy threshold should be in (0, 1).")

        if self.activation_cap < 1:
            raise ConfigError("The activation cap should be positive.")

        if self.rank < 1:
            raise ConfigError("The rank should be positive.")


@dataclass(frozen=True, eq=False)
class SubspaceMemory:
    """An immutable dual subspace memory in R^d."""

    ambient_dim: int
    stored_side: StoredSide
    basis: DenseMatrix
    memory_dim: int

    @property
    def saturated(self) -> bool:
        """Whether the memory spans the whole ambient space.

        Returns
        -------
        bool
            `True` once `memory_dim` reaches `ambient_dim`.
        """

        return self.memory_dim == self.ambient_dim

    @property
    def free_dim(self) -> int:
        """The dimension left orthogonal to the memory.

        Returns
        -------
        int
            `ambient_dim - memory_dim`.
        """

        return self.ambient_dim - self.memory_dim


class ActivationBuffer:
    """A reservoir of token embeddings captured at one projection input.

    Parameters
    ----------
    layer_id : int
        The encoder layer.
    projection : Projection
        The projection the tokens feed.
    dim : int
        The embedding dimension d.
    cap : int
        The maximum number of kept tokens.
    rng : numpy.random.Generator
        The generator driving reservoir sampling.
    """

    def __init__(
        self,
        layer_id: int,
        projection: Projection,
        dim: int,
        cap: int,
        rng: np.random.Generator,
    ) -> None:
        self.layer_id = layer_id
        self.projection = projection
        self.cap = cap
        self._rng = rng
        self._rows = np.zeros((cap, dim))
        self._count = 0
        self._seen = 0

    def __len__(self) -> int:
        return self._count

    @property
    def seen(self) -> int:
        """The number of tokens offered so far.

        Returns
        -------
        int
            The number of offered tokens, kept or not.
        """

        return self._seen

    @property
    def samples(self) -> DenseMatrix:
        """The kept tokens as columns.

        Returns
        -------
        DenseMatrix
            The d × n matrix `H` of kept tokens, n ≤ cap.
        """

        return self._rows[: self._count].T.copy()

    def offer(self, tokens: npt.ArrayLike) -> None:
        """Offer tokens to the reservoir (algorithm R).

        Parameters
        ----------
        tokens : ArrayLike
            The tokens as rows, shape (count, d).

        Raises
        ------
        DataError
            If a token has non-finite entries.
        """

        tokens = np.asarray(tokens, dtype=np.float64)

        if not np.all(np.isfinite(tokens)):
            raise DataError("Captured activations have non-finite entries.")

        for token in tokens:
            if self._count < self.cap:
                self._rows[self._count] = token
                self._count += 1
            else:
                j = int(self._rng.integers(0, self._seen + 1))
                if j < self.cap:
                    self._rows[j] = token
            self._seen += 1

    def clear(self) -> None:
        """Drop every kept token."""

        self._count = 0
        self._seen = 0


def memory_init(d: int) -> SubspaceMemory:
    """Create the empty memory of a d-dimensional space.

    Parameters
    ----------
    d : int
        The ambient dimension, at least 1.

    Returns
    -------
    SubspaceMemory
        The memory storing a d × 0 gradient-space basis.

    Raises
    ------
    ConfigError
        If d is less than 1.
    """

    if d < 1:
        raise ConfigError("The ambient dimension should be positive.")

    return SubspaceMemory(
        ambient_dim=d,
        stored_side=StoredSide.GRADIENT_SPACE,
        basis=np.zeros((d, 0)),
        memory_dim=0,
    )


def effective_gradient_basis(mem: SubspaceMemory) -> DenseMatrix:
    """Materialize the orthonormal basis of the gradient-space side.

    Parameters
    ----------
    mem : SubspaceMemory
        The memory.

    Returns
    -------
    DenseMatrix
        A d × memory_dim orthonormal basis. When the complement is stored, a
        basis of its null space.
    """

    if mem.stored_side is StoredSide.GRADIENT_SPACE:
        return mem.basis

    if mem.basis.shape[1] == 0:
        return np.eye(mem.ambient_dim)

    if mem.memory_dim == 0:
        return np.zeros((mem.ambient_dim, 0))

    null = scipy.linalg.null_space(mem.basis.T)
    return fix_signs(null[:, : mem.memory_dim])[0]


def _residual(mem: SubspaceMemory, h: DenseMatrix) -> DenseMatrix:
    """`(I - M M^T) h` computed from whichever side is stored."""

    if mem.stored_side is StoredSide.GRADIENT_SPACE:
        return project_complement(mem.basis, h)

    c = mem.basis
    return c @ (c.T @ h)


def _check_buffer(mem: SubspaceMemory, h: DenseMatrix) -> DenseMatrix:
    h = as_matrix(h, name="activations")

    if h.shape[1] == 0:
        raise DataError("The activation buffer is empty.")

    if h.shape[0] != mem.ambient_dim:
        raise DataError(
            f"Activations of dimension {h.shape[0]} do not match a memory in "
            f"R^{mem.ambient_dim}."
        )

    return h


def _samples(buf: "ActivationBuffer | DenseMatrix") -> DenseMatrix:
    if isinstance(buf, ActivationBuffer):
        return buf.samples

    return np.asarray(buf, dtype=np.float64)


def select_adapter_basis(
    mem: SubspaceMemory,
    buf: "ActivationBuffer | DenseMatrix",
    r: int,
    *,
    fill: np.random.Generator | None = None,
) -> DenseMatrix:
    """Select a frozen adapter basis orthogonal to the memory.

    The activations are projected onto the orthogonal complement of the
    memory and the top-r left singular vectors of the projection are kept.

    Parameters
    ----------
    mem : SubspaceMemory
        The memory of past tasks.
    buf : ActivationBuffer | DenseMatrix
        The buffer, or its d × n activation matrix `H`.
    r : int
        The adapter rank.
    fill : np.random.Generator | None, optional
        When given, a projection of rank below r is completed with random
        directions orthogonal to the memory and to the kept singular
        vectors instead of raising, by default None.

    Returns
    -------
    DenseMatrix
        The d × r basis `A` with orthonormal columns orthogonal to the memory.

    Raises
    ------
    DataError
        If the buffer is empty or of the wrong dimension.
    CapacityError
        If r exceeds the free dimension `d - memory_dim`.
    RankError
        If fewer than r singular values of the projection are nonzero and
        no `fill` generator is given.
    """

    h = _check_buffer(mem, _samples(buf))

    if r > mem.free_dim:
        raise CapacityError(
            f"rank {r} exceeds the {mem.free_dim} dimensions left orthogonal "
            f"to the memory"
        )

    svd = thin_svd(_residual(mem, h))
    nonzero = int(np.sum(svd.singular_values > SINGULAR_TOL))

    m = effective_gradient_basis(mem)

    if nonzero < r and fill is not None:
        logger.warning(
            "projected activations have rank %d < %d, completing the basis "
            "with random complement directions",
            nonzero,
            r,
        )
        kept = svd.u[:, :nonzero]
        noise = fill.standard_normal((mem.ambient_dim, r - nonzero))
        extra = project_complement(kept, project_complement(m, noise))
        return qr_orthonormalize(project_complement(m, np.hstack([kept, extra])))

    if nonzero < r:
        raise RankError(
            f"projected activations have rank {nonzero} < {r}; use a rank of "
            f"at most {nonzero}",
            column=nonzero,
        )

    # Re-project so small singular directions stay exactly orthogonal.
    return qr_orthonormalize(project_complement(m, svd.u[:, :r]))


def _growth(covered: float, total: float, sigma: np.ndarray, eps: float) -> int:
    """The smallest k whose cumulative energy ratio reaches eps."""

    if total == 0.0 or covered / total >= eps:
        return 0

    cumulative = (covered + np.cumsum(sigma**2)) / total
    reached = np.flatnonzero(cumulative >= eps)

    return int(reached[0]) + 1 if reached.size else sigma.size


def update_memory(
    mem: SubspaceMemory, buf: "ActivationBuffer | DenseMatrix", cfg: MemoryConfig
) -> SubspaceMemory:
    """Grow the memory with the directions of a finished task.

    The gradient-space side grows by the fewest leading singular directions
    of the projected activations that bring the covered energy to the
    threshold. Once the gradient-space side is larger than half the ambient
    dimension, the complement is stored instead.

    Parameters
    ----------
    mem : SubspaceMemory
        The current memory.
    buf : ActivationBuffer | DenseMatrix
        The buffer, or its d × n activation matrix `H`.
    cfg : MemoryConfig
        The memory settings.

    Returns
    -------
    SubspaceMemory
        The grown memory. `saturated` reports a memory spanning R^d.

    Raises
    ------
    DataError
        If the buffer is empty or of the wrong dimension.
    """

    h = _check_buffer(mem, _samples(buf))
    d = mem.ambient_dim

    residual = _residual(mem, h)
    total = float(np.sum(h**2))
    covered = total - float(np.sum(residual**2))

    svd = thin_svd(residual)
    sigma = svd.singular_values[svd.singular_values > SINGULAR_TOL]

    k = min(_growth(covered, total, sigma, cfg.energy_threshold), mem.free_dim)
    logger.debug("memory in R^%d grows by %d directions", d, k)

    if k == 0:
        return mem

    old = effective_gradient_basis(mem)
    new = qr_orthonormalize(project_complement(old, svd.u[:, :k]))
    memory_dim = mem.memory_dim + k

    if mem.stored_side is StoredSide.GRADIENT_SPACE:
        grown = np.hstack([old, new])

        if memory_dim <= math.ceil(d / 2):
            result = SubspaceMemory(d, StoredSide.GRADIENT_SPACE, grown, memory_dim)
        else:
            complement = fix_signs(scipy.linalg.null_space(grown.T))[0]
            complement = complement[:, : d - memory_dim]
            result = SubspaceMemory(d, StoredSide.COMPLEMENT, complement, memory_dim)
    else:
        remaining = d - memory_dim

        if remaining == 0:
            complement = np.zeros((d, 0))
        else:
            shrunk = project_complement(new, mem.basis)
            complement = thin_svd(shrunk).u[:, :remaining]

        result = SubspaceMemory(d, StoredSide.COMPLEMENT, complement, memory_dim)

    if result.saturated:
        logger.info("subspace memory in R^%d is saturated", d)

    return result


def check_memory(mem: SubspaceMemory) -> bool:
    """Check the structural invariants of a memory.

    Parameters
    ----------
    mem : SubspaceMemory
        The memory.

    Returns
    -------
    bool
        Whether the basis is orthonormal, the stored column count matches
        the stored side, and the dual economy bound holds.
    """

    d, cols = mem.basis.shape
    expected = (
        mem.memory_dim
        if mem.stored_side is StoredSide.GRADIENT_SPACE
        else d - mem.memory_dim
    )

    return (
        d == mem.ambient_dim
        and 0 <= mem.memory_dim <= d
        and cols == expected
        and cols <= math.ceil(d / 2) + 1
        and is_orthonormal(mem.basis)
    )


@dataclass
class MemoryBank:
    """The memories of one client, keyed by (layer, projection)."""

    dim: int
    num_layers: int
    memories: dict[tuple[int, Projection], SubspaceMemory] = field(
        default_factory=dict
    )

    def __post_init__(self) -> None:
        for layer in range(self.num_layers):
            for projection in Projection:
                self.memories.setdefault((layer, projection), memory_init(self.dim))

    def __getitem__(self, key: tuple[int, Projection]) -> SubspaceMemory:
        return self.memories[key]

    def __setitem__(self, key: tuple[int, Projection], mem: SubspaceMemory) -> None:
        self.memories[key] = mem

    def keys(self) -> list[tuple[int, Projection]]:
        """The (layer, projection) keys in layer-major order.

        Returns
        -------
        list[tuple[int, Projection]]
            The keys.
        """

        return [(layer, p) for layer in range(self.num_layers) for p in Projection]
