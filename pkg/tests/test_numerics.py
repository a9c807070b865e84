import numpy as np
import pytest
from pmodlab import numerics


def test_matmul_examples():
    np.testing.assert_array_equal(numerics.matmul(np.eye(2), np.eye(2)), np.eye(2))
    np.testing.assert_array_equal(numerics.matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])
    rng = numerics.make_rng(1)
    np.testing.assert_array_equal(numerics.matmul(np.zeros((3, 4)), rng.normal(size = (4, 5))), np.zeros((3, 5)))


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    rng = numerics.make_rng(3)
    a, b, c = (rng.normal(size = (8, 8)) for _ in range(3))
    np.testing.assert_allclose(numerics.matmul(numerics.matmul(a, b), c), numerics.matmul(a, numerics.matmul(b, c)), atol = 1e-9)


def test_count_ops():
    with numerics.count_ops() as counter:
        numerics.matmul(np.ones((3, 4)), np.ones((4, 5)))
        numerics.matmul(np.ones((2, 3, 4)), np.ones((2, 4, 6)))
    assert counter.macs == 3 * 4 * 5 + 2 * 3 * 4 * 6
    assert counter.calls == 2
    numerics.matmul(np.ones((3, 4)), np.ones((4, 5)))
    assert counter.macs == 3 * 4 * 5 + 2 * 3 * 4 * 6


def test_masked_kernels_count_visible_pairs():
    q = np.ones((2, 3, 4))
    visible = np.tril(np.ones((3, 3), dtype = bool))
    with numerics.count_ops() as counter:
        scores = numerics.masked_scores(q, q, visible[None])
        probs = numerics.softmax_rows(scores)
        numerics.masked_mix(probs, q, visible[None])
    assert counter.macs == 2 * (2 * 6 * 4)
    assert np.all(probs[:, 0, 1:] == 0)


def test_softmax_examples():
    np.testing.assert_allclose(numerics.softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])
    big = numerics.softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(big))
    assert big[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(numerics.softmax_rows([[1.0, 2.0, 3.0]]), [[0.09003, 0.24473, 0.66524]], atol = 1e-5)


def test_softmax_properties():
    a = numerics.make_rng(0).normal(size = (6, 9)) * 5
    p = numerics.softmax_rows(a)
    np.testing.assert_allclose(p.sum(axis = 1), 1.0, atol = 1e-12)
    np.testing.assert_allclose(numerics.softmax_rows(a + 7.5), p, atol = 1e-12)


def test_rmsnorm_examples():
    y, _ = numerics.rmsnorm(np.array([3.0, 4.0]), np.ones(2), 0.0)
    np.testing.assert_allclose(y, [0.84853, 1.13137], atol = 1e-5)
    y, _ = numerics.rmsnorm(np.zeros(4), np.ones(4), 1e-6)
    np.testing.assert_array_equal(y, np.zeros(4))
    y, _ = numerics.rmsnorm(np.full(5, -2.5), np.ones(5), 1e-12)
    np.testing.assert_allclose(y, -np.ones(5), atol = 1e-9)


def test_rmsnorm_rejects_mismatch():
    with pytest.raises(ValueError):
        numerics.rmsnorm(np.ones(3), np.ones(4), 1e-6)


def test_silu_examples():
    assert numerics.silu(0.0) == 0.0
    assert numerics.silu(1.0) == pytest.approx(0.731059, abs = 1e-6)
    assert numerics.silu(50.0) == pytest.approx(50.0)


def test_fd_grad_examples():
    at = numerics.make_rng(2).normal(size = (3, 4))
    np.testing.assert_allclose(numerics.fd_grad(np.sum, at), np.ones((3, 4)), atol = 1e-9)
    np.testing.assert_allclose(numerics.fd_grad(lambda x: np.sum(x ** 2), np.array([[1.0, 2.0]])), [[2.0, 4.0]], atol = 1e-8)
    with pytest.raises(ValueError):
        numerics.fd_grad(np.sum, at, h = 0.0)


def test_fd_grad_subset_leaves_nan():
    grad = numerics.fd_grad(np.sum, np.zeros(4), indices = [1, 3])
    assert np.isnan(grad[0]) and grad[1] == pytest.approx(1.0)


def test_silu_grad_matches_fd(rel_error):
    x = numerics.make_rng(4).normal(size = 7)
    assert rel_error(numerics.silu_grad(x), numerics.fd_grad(lambda v: np.sum(numerics.silu(v)), x)) < 1e-4


def test_softmax_backward_matches_fd(rel_error):
    rng = numerics.make_rng(5)
    a, r = rng.normal(size = (3, 6)), rng.normal(size = (3, 6))
    analytic = numerics.softmax_rows_backward(numerics.softmax_rows(a), r)
    assert rel_error(analytic, numerics.fd_grad(lambda v: np.sum(numerics.softmax_rows(v) * r), a)) < 1e-4


def test_rmsnorm_backward_matches_fd(rel_error):
    rng = numerics.make_rng(6)
    x, gain, r = rng.normal(size = (4, 8)), rng.normal(size = 8), rng.normal(size = (4, 8))
    y, inv = numerics.rmsnorm(x, gain, 1e-6)
    dx, dgain = numerics.rmsnorm_backward(r, x, gain, inv)
    assert rel_error(dx, numerics.fd_grad(lambda v: np.sum(numerics.rmsnorm(v, gain, 1e-6)[0] * r), x)) < 1e-4
    assert rel_error(dgain, numerics.fd_grad(lambda g: np.sum(numerics.rmsnorm(x, g, 1e-6)[0] * r), gain)) < 1e-4


def test_rng_is_reproducible():
    a = numerics.make_rng([7, 1]).normal(size = 10)
    b = numerics.make_rng([7, 1]).normal(size = 10)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, numerics.make_rng([7, 2]).normal(size = 10))


def test_first_overflow():
    assert numerics.first_overflow([2.0] * 32) == 16
    assert numerics.first_overflow([1.2] * 32) is None
    assert numerics.first_overflow([2.0] * 32, dtype = np.float64) is None
    assert 1.2 ** 32 == pytest.approx(341.8, abs = 0.1)
    assert 2.0 ** 16 > numerics.HALF_MAX == 65504.0
