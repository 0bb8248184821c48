import numpy as np
import pytest

from concept_gradient.errors import InvalidInput
from concept_gradient.linalg import as_matrix, default_rel_tol, pinv, svd

SEEDS = range(20)


def random_shape(rng):
    return int(rng.integers(1, 9)), int(rng.integers(1, 9))


def test_svd_identity():
    s = svd(np.eye(2))
    assert np.allclose(s.sigma, [1, 1])
    assert np.allclose(np.abs(s.u), np.eye(2))
    assert np.allclose(s.u @ s.v.T, np.eye(2))


def test_svd_diagonal():
    assert np.allclose(svd([[3.0, 0.0], [0.0, 2.0]]).sigma, [3, 2])


def test_svd_reconstruction(rng):
    a = rng.standard_normal((5, 3))
    err = np.linalg.norm(svd(a).reconstruct() - a) / np.linalg.norm(a)
    assert err < 1e-9


def test_svd_rejects_non_finite():
    with pytest.raises(InvalidInput):
        svd([[1.0, np.nan]])
    with pytest.raises(InvalidInput):
        svd([[np.inf]])


def test_pinv_identity():
    assert np.allclose(pinv(np.eye(3)), np.eye(3), atol=1e-15)


def test_pinv_column_vector():
    assert np.allclose(pinv([[100.0], [0.0]]), [[0.01, 0.0]], atol=1e-15)


def test_pinv_upper_triangular():
    expected = np.array([[1.0, -10.0], [0.0, 10.0]])
    assert np.allclose(pinv([[1.0, 1.0], [0.0, 0.1]]), expected, atol=1e-9)


def test_pinv_zero_matrix_returns_transposed_zeros():
    out = pinv(np.zeros((3, 2)))
    assert out.shape == (2, 3)
    assert not out.any()


def test_pinv_one_dimensional_input_is_a_column():
    assert pinv([3.0, 4.0]).shape == (1, 2)


def test_pinv_rejects_bad_tolerance():
    with pytest.raises(InvalidInput):
        pinv(np.eye(2), rel_tol=0.0)


def test_pinv_truncates_tiny_singular_values():
    a = np.diag([1.0, 1e-14])
    assert np.allclose(pinv(a), np.diag([1.0, 0.0]))
    assert default_rel_tol((2, 2)) == pytest.approx(2e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_moore_penrose_conditions(seed):
    rng = np.random.default_rng(seed)
    r, c = random_shape(rng)
    a = rng.standard_normal((r, c))
    if seed % 3 == 0 and min(r, c) > 1:
        # rank-deficient case
        a[:, -1] = a[:, 0]
    p = pinv(a)
    assert np.linalg.norm(a @ p @ a - a) < 1e-8
    assert np.linalg.norm(p @ a @ p - p) < 1e-8
    assert np.linalg.norm(a @ p - (a @ p).T) < 1e-8
    assert np.linalg.norm(p @ a - (p @ a).T) < 1e-8


@pytest.mark.parametrize("seed", SEEDS)
def test_left_inverse_full_column_rank(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 8))
    r = int(rng.integers(c, 9))
    a = rng.standard_normal((r, c))
    assert np.linalg.norm(pinv(a) @ a - np.eye(c)) < 1e-8


@pytest.mark.parametrize("seed", SEEDS)
def test_vector_rule(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((int(rng.integers(1, 9)), 1))
    expected = v.T / float(np.sum(v * v))
    assert np.max(np.abs(pinv(v) - expected)) < 1e-12


@pytest.mark.parametrize("seed", SEEDS)
def test_invertible_matches_direct_solve(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    a = rng.standard_normal((n, n)) + n * np.eye(n)
    assert np.max(np.abs(pinv(a) - np.linalg.solve(a, np.eye(n)))) < 1e-8


def test_as_matrix_rejects_empty():
    with pytest.raises(InvalidInput):
        as_matrix(np.zeros((0, 2)))
