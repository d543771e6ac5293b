import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udavi.numerics import (
    NonFiniteError,
    NotPositiveDefiniteError,
    Stream,
    cholesky_solve,
    finite_diff_gradient,
    gaussian_sample,
    make_rng,
)


def test_gaussian_sample_mean_within_four_sigma():
    n = 10**6
    for k in range(4):
        x = gaussian_sample(make_rng(0, k), n)
        assert abs(x.mean()) < 4.0 / math.sqrt(n)


def test_gaussian_sample_variance_close_to_one():
    # var of the sample variance is 2/n; 0.01 is ~7 standard errors at n=1e6
    x = gaussian_sample(make_rng(0), 10**6)
    assert abs(x.var() - 1.0) < 0.01


def test_gaussian_sample_same_seed_bit_identical():
    a = gaussian_sample(make_rng(7, 3), (4, 5, 2))
    b = gaussian_sample(make_rng(7, 3), (4, 5, 2))
    assert a.tobytes() == b.tobytes()


def test_streams_are_distinct():
    a = gaussian_sample(make_rng(7, Stream.TRAIN, 1), 16)
    b = gaussian_sample(make_rng(7, Stream.TRAIN, 2), 16)
    assert not np.array_equal(a, b)


def test_gaussian_sample_rejects_bad_shape():
    with pytest.raises(ValueError):
        gaussian_sample(make_rng(0), (3, 0))


def test_fd_quadratic():
    g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_fd_constant_is_zero():
    g = finite_diff_gradient(lambda x: 4.2, np.ones(5))
    assert np.all(g == 0.0)


def test_fd_standard_normal_score():
    logpdf = lambda x: float(-0.5 * x[0] ** 2 - 0.5 * math.log(2 * math.pi))
    assert finite_diff_gradient(logpdf, np.array([1.0]))[0] == pytest.approx(-1.0, abs=1e-6)


def test_fd_nonfinite_raises():
    with pytest.raises(NonFiniteError):
        finite_diff_gradient(lambda x: math.sqrt(x[0]) if x[0] >= 0 else math.nan, np.array([0.0]), 1e-3)


def test_cholesky_solve_identity():
    b = np.array([1.5, -2.0, 3.0])
    assert np.array_equal(cholesky_solve(np.eye(3), b), b)


def test_cholesky_solve_diagonal():
    x = cholesky_solve(np.diag([2.0, 4.0]), np.array([2.0, 8.0]))
    np.testing.assert_allclose(x, [1.0, 2.0], rtol=0, atol=1e-15)


def test_cholesky_solve_random_spd_residual():
    rng = make_rng(3)
    m = rng.standard_normal((16, 16))
    a = m @ m.T + 16 * np.eye(16)
    b = rng.standard_normal(16)
    x = cholesky_solve(a, b)
    assert np.linalg.norm(a @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_cholesky_failure_names_pivot():
    a = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(NotPositiveDefiniteError) as exc:
        cholesky_solve(a, np.ones(4))
    assert exc.value.pivot == 3
    assert "pivot 3" in str(exc.value)


@given(st.integers(2, 12), st.integers(0, 2**31))
def test_cholesky_solve_multiply_back(n, seed):
    rng = make_rng(seed)
    m = rng.standard_normal((n, n))
    a = m @ m.T + n * np.eye(n)
    b = rng.standard_normal((n, 2))
    x = cholesky_solve(a, b)
    assert np.linalg.norm(a @ x - b) <= 1e-10 * np.linalg.norm(b)
