"""The dense matrix kernel.

Every matrix is a 2-D `numpy.ndarray` of `float64`. The routines here wrap
numpy and LAPACK (through `scipy.linalg`) with the shape, finiteness and
orthonormality contracts the rest of the package relies on, plus a fixed
column-sign convention so results are reproducible bit for bit.
"""

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import scipy.linalg  # type: ignore

from orthofcl.errors import (
    ContractError,
    DimensionError,
    NumericalError,
    RankError,
)

DenseMatrix = npt.NDArray[np.float64]

#: Column norm below which QR reports rank deficiency.
RANK_TOL = 1e-10

#: Tolerance of the orthonormality check on bases.
ORTHONORMAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class SvdResult:
    """The thin singular value decomposition `m = u @ diag(s) @ v.T`."""

    u: DenseMatrix
    singular_values: npt.NDArray[np.float64]
    v: DenseMatrix


def as_matrix(m: npt.ArrayLike, *, name: str = "matrix") -> DenseMatrix:
    """Convert an array-like to a finite 2-D `float64` matrix.

    Parameters
    ----------
    m : ArrayLike
        The input.
    name : str, optional
        The name used in error messages, by default "matrix".

    Returns
    -------
    DenseMatrix
        The matrix. It is not copied if already suitable.

    Raises
    ------
    DimensionError
        If the input is not 2-D.
    NumericalError
        If the input has NaN or infinite entries.
    """

    arr = np.asarray(m, dtype=np.float64)

    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")

    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} has non-finite entries")

    return arr


def fix_signs(q: DenseMatrix, *others: DenseMatrix) -> tuple[DenseMatrix, ...]:
    """Flip column signs so the largest-magnitude entry of each column of `q`
    is positive, flipping the same columns of `others`.

    Parameters
    ----------
    q : DenseMatrix
        The matrix whose columns decide the signs.
    *others : DenseMatrix
        Matrices whose columns are paired with those of `q`.

    Returns
    -------
    tuple[DenseMatrix, ...]
        The sign-fixed copies of `q` and `others`, in order.
    """

    if q.shape[1] == 0 or q.shape[0] == 0:
        return (q.copy(), *(o.copy() for o in others))

    pivots = np.argmax(np.abs(q), axis=0)
    signs = np.where(q[pivots, np.arange(q.shape[1])] < 0, -1.0, 1.0)

    return (q * signs, *(o * signs for o in others))


def matmul(a: npt.ArrayLike, b: npt.ArrayLike) -> DenseMatrix:
    """Multiply two matrices.

    Parameters
    ----------
    a : ArrayLike
        The left operand, m × k.
    b : ArrayLike
        The right operand, k × n.

    Returns
    -------
    DenseMatrix
        The m × n product.

    Raises
    ------
    DimensionError
        If the inner dimensions differ.
    """

    a = as_matrix(a, name="left operand")
    b = as_matrix(b, name="right operand")

    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")

    return a @ b


def qr_orthonormalize(m: npt.ArrayLike) -> DenseMatrix:
    """Orthonormalize the columns of a tall matrix by Householder QR.

    Parameters
    ----------
    m : ArrayLike
        The matrix, with at least as many rows as columns.

    Returns
    -------
    DenseMatrix
        `Q` of the same shape with orthonormal columns and the same span as
        `m`, the largest-magnitude entry of every column being positive.

    Raises
    ------
    DimensionError
        If `m` has more columns than rows.
    RankError
        If a column is (numerically) dependent on the previous ones.
    """

    m = as_matrix(m)
    rows, cols = m.shape

    if rows < cols:
        raise DimensionError(f"QR needs rows >= cols, got shape {m.shape}")

    if cols == 0:
        return np.zeros((rows, 0))

    q, r = scipy.linalg.qr(m, mode="economic")

    deficient = np.flatnonzero(np.abs(np.diag(r)) < RANK_TOL)
    if deficient.size:
        column = int(deficient[0])
        raise RankError(
            f"column {column} is linearly dependent on the previous columns",
            column=column,
        )

    return fix_signs(q)[0]


def thin_svd(m: npt.ArrayLike) -> SvdResult:
    """Compute the thin singular value decomposition.

    Parameters
    ----------
    m : ArrayLike
        The nonempty m × n matrix.

    Returns
    -------
    SvdResult
        `u` (m × k), descending singular values (k) and `v` (n × k) with
        k = min(m, n). Columns of `u` follow the sign convention of
        `qr_orthonormalize`; `v` is flipped along.

    Raises
    ------
    DimensionError
        If `m` is empty.
    NumericalError
        If LAPACK fails to converge.
    """

    m = as_matrix(m)

    if m.size == 0:
        raise DimensionError(f"cannot decompose an empty matrix of shape {m.shape}")

    try:
        u, s, vt = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        try:
            u, s, vt = scipy.linalg.svd(
                m, full_matrices=False, lapack_driver="gesvd"
            )
        except np.linalg.LinAlgError as e:
            cap = 100 * min(m.shape)
            raise NumericalError(
                f"SVD did not converge within {cap} sweeps", iterations=cap
            ) from e

    u, v = fix_signs(u, vt.T)

    return SvdResult(u=u, singular_values=s, v=v)


def is_orthonormal(basis: DenseMatrix, tol: float = ORTHONORMAL_TOL) -> bool:
    """Check whether the columns of a matrix are orthonormal.

    Parameters
    ----------
    basis : DenseMatrix
        The matrix.
    tol : float, optional
        The Frobenius tolerance on `basis.T @ basis - I`, by default 1e-8.

    Returns
    -------
    bool
        Whether the check passes. An empty basis is orthonormal.
    """

    k = basis.shape[1]
    if k == 0:
        return True

    return bool(np.linalg.norm(basis.T @ basis - np.eye(k)) <= tol)


def project_complement(basis: npt.ArrayLike, h: npt.ArrayLike) -> DenseMatrix:
    """Project onto the orthogonal complement of a basis, `(I - M M^T) h`.

    Parameters
    ----------
    basis : ArrayLike
        The d × m basis `M` with orthonormal columns, m may be 0.
    h : ArrayLike
        The d × n matrix to project.

    Returns
    -------
    DenseMatrix
        The projection. It equals a copy of `h` when the basis is empty.

    Raises
    ------
    DimensionError
        If the row counts differ.
    ContractError
        If the basis is not orthonormal.
    """

    basis = as_matrix(basis, name="basis")
    h = as_matrix(h, name="h")

    if basis.shape[0] != h.shape[0]:
        raise DimensionError(
            f"basis of shape {basis.shape} does not match h of shape {h.shape}"
        )

    if not is_orthonormal(basis):
        raise ContractError("basis columns are not orthonormal")

    if basis.shape[1] == 0:
        return h.copy()

    return h - basis @ (basis.T @ h)
