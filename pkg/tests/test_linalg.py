import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeqlab.errors import FactorizationError, InputError
from moeqlab.linalg import cholesky, invert_spd, matmul, scale_rows
from tests.conftest import random_spd


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 5))
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_expansion():
    assert matmul([[1, 2], [3, 4]], [[1], [1]]).tolist() == [[3.0], [7.0]]


def test_matmul_zero(rng):
    assert not matmul(rng.standard_normal((4, 3)), np.zeros((3, 2))).any()


def test_matmul_rejects_mismatch():
    with pytest.raises(InputError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_matmul_associative(seed, n, k, p, q):
    r = np.random.default_rng(seed)
    a, b, c = r.uniform(-1, 1, (n, k)), r.uniform(-1, 1, (k, p)), r.uniform(-1, 1, (p, q))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-8 * max(np.linalg.norm(left), 1e-300) + 1e-15


def test_cholesky_identity():
    assert np.array_equal(cholesky(np.eye(4)), np.eye(4))


def test_cholesky_two_by_two():
    L = cholesky([[4.0, 2.0], [2.0, 3.0]])
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(L @ L.T, [[4, 2], [2, 3]], atol=1e-15)


def test_cholesky_reports_failing_pivot():
    with pytest.raises(FactorizationError) as info:
        cholesky([[1.0, 2.0], [2.0, 1.0]])
    assert info.value.pivot == 1
    assert "pivot 1" in str(info.value)


def test_cholesky_rejects_asymmetric():
    with pytest.raises(InputError):
        cholesky([[1.0, 0.5], [0.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 24))
def test_cholesky_recomposes(seed, n):
    h = random_spd(np.random.default_rng(seed), n)
    L = cholesky(h)
    assert np.allclose(L, np.tril(L))
    assert np.linalg.norm(L @ L.T - h) / np.linalg.norm(h) <= 1e-8
    np.testing.assert_allclose(L, np.linalg.cholesky(h), rtol=1e-9, atol=1e-12)


def test_invert_spd_examples():
    assert np.allclose(invert_spd(np.eye(2)), np.eye(2))
    np.testing.assert_allclose(invert_spd(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16))
def test_invert_spd_residual(seed, n):
    r = np.random.default_rng(seed)
    h = random_spd(r, n, eps=1e-2)
    if np.linalg.cond(h) >= 1e6:
        return
    inv = invert_spd(h)
    assert np.array_equal(inv, inv.T)
    assert np.linalg.norm(h @ inv - np.eye(n)) <= 1e-6


def test_invert_spd_propagates_failure():
    with pytest.raises(FactorizationError):
        invert_spd([[1.0, 2.0], [2.0, 1.0]])


def test_scale_rows(rng):
    a = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(scale_rows(a, [1.0, 2.0, 0.0]), np.diag([1.0, 2.0, 0.0]) @ a)
