import numpy as np
import pytest

from orthofcl.errors import ContractError, DimensionError, NumericalError, RankError
from orthofcl.linalg import (
    as_matrix,
    fix_signs,
    is_orthonormal,
    matmul,
    project_complement,
    qr_orthonormalize,
    thin_svd,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


def test_matmul() -> None:
    a = [[1.0, 2.0], [3.0, 4.0]]
    assert matmul(np.eye(2), a) == pytest.approx(np.array(a))
    assert matmul([[1.0, 0.0]], [[0.0], [5.0]]) == pytest.approx(np.zeros((1, 1)))


def test_matmul_matches_triple_loop(rng: np.random.Generator) -> None:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))

    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]

    assert np.max(np.abs(matmul(a, b) - expected)) <= 1e-12


def test_matmul_shape_mismatch() -> None:
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix() -> None:
    with pytest.raises(DimensionError):
        as_matrix(np.ones(3))

    with pytest.raises(NumericalError):
        as_matrix([[1.0, np.nan]])


def test_qr_orthonormalize() -> None:
    assert qr_orthonormalize(np.eye(3)) == pytest.approx(np.eye(3))
    assert qr_orthonormalize([[3.0], [4.0]]) == pytest.approx(np.array([[0.6], [0.8]]))


def test_qr_orthonormalize_random(rng: np.random.Generator) -> None:
    m = rng.standard_normal((6, 3))
    q = qr_orthonormalize(m)

    assert np.linalg.norm(q.T @ q - np.eye(3)) <= 1e-10
    assert np.linalg.norm(q @ q.T @ m - m) <= 1e-8

    pivots = np.argmax(np.abs(q), axis=0)
    assert np.all(q[pivots, np.arange(3)] > 0)


def test_qr_orthonormalize_rank_deficient() -> None:
    m = np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]])

    with pytest.raises(RankError) as excinfo:
        qr_orthonormalize(m)

    assert excinfo.value.column == 1

    with pytest.raises(DimensionError):
        qr_orthonormalize(np.ones((2, 3)))


def test_thin_svd() -> None:
    svd = thin_svd(np.diag([3.0, 1.0]))

    assert svd.singular_values == pytest.approx([3.0, 1.0])
    assert np.abs(svd.u) == pytest.approx(np.eye(2))
    assert np.abs(svd.v) == pytest.approx(np.eye(2))


def test_thin_svd_rank_one() -> None:
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 1.0])
    svd = thin_svd(np.outer(u, v))

    assert svd.singular_values == pytest.approx([2.0, 0.0], abs=1e-12)


def test_thin_svd_reconstruction(rng: np.random.Generator) -> None:
    m = rng.standard_normal((5, 3))
    svd = thin_svd(m)

    assert svd.u.shape == (5, 3)
    assert svd.v.shape == (3, 3)
    assert np.all(np.diff(svd.singular_values) <= 0)
    assert np.linalg.norm(svd.u @ np.diag(svd.singular_values) @ svd.v.T - m) <= 1e-8

    with pytest.raises(DimensionError):
        thin_svd(np.zeros((0, 3)))


def test_fix_signs() -> None:
    q = np.array([[-0.6, 0.0], [0.8, -1.0]])
    other = np.array([[1.0, 2.0]])
    fixed, flipped = fix_signs(q, other)

    assert fixed == pytest.approx(np.array([[-0.6, 0.0], [0.8, 1.0]]))
    assert flipped == pytest.approx(np.array([[1.0, -2.0]]))


def test_project_complement() -> None:
    e1 = np.array([[1.0], [0.0]])
    assert project_complement(e1, [[1.0], [1.0]]) == pytest.approx(
        np.array([[0.0], [1.0]])
    )

    h = np.arange(6.0).reshape(3, 2)
    assert project_complement(np.zeros((3, 0)), h) == pytest.approx(h)
    assert project_complement(np.eye(3), h) == pytest.approx(np.zeros((3, 2)))


def test_project_complement_contract() -> None:
    with pytest.raises(ContractError):
        project_complement(np.array([[2.0], [0.0]]), np.ones((2, 1)))

    with pytest.raises(DimensionError):
        project_complement(np.eye(3), np.ones((2, 1)))


def test_is_orthonormal() -> None:
    assert is_orthonormal(np.zeros((4, 0)))
    assert is_orthonormal(np.eye(4)[:, :2])
    assert not is_orthonormal(np.ones((2, 2)))
