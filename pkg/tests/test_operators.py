import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udavi.numerics import make_rng
from udavi.operators import ForwardOperator, make_gaussian_kernel


def test_wide_61_kernel_sums_to_one_center_max():
    k = make_gaussian_kernel(61, 3.0)
    assert abs(k.sum() - 1.0) <= 1e-12
    assert k[30, 30] == k.max()
    assert np.count_nonzero(k == k.max()) == 1


def test_size_one_kernel():
    assert np.array_equal(make_gaussian_kernel(1, 0.7), np.array([[1.0]]))


def test_wide_sigma_kernel_near_uniform():
    # entries are exp(-d^2/2s^2)/Z; with s=1e6 the spread is ~1e-12
    k = make_gaussian_kernel(3, 1e6)
    np.testing.assert_allclose(k, np.full((3, 3), 1 / 9), atol=1e-6)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        make_gaussian_kernel(4, 1.0)


def test_kernel_validation():
    with pytest.raises(ValueError):
        ForwardOperator("blur", kernel=np.array([[0.5, 0.6, 0.0]] * 3) / 1.0)
    asym = np.array([[0.0, 0.0, 0.0], [0.0, 0.6, 0.4], [0.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        ForwardOperator("blur", kernel=asym)


def test_blur_constant_image_fixed():
    op = ForwardOperator.gaussian_blur(5, 1.2)
    x = np.full((9, 7, 2), -0.3)
    np.testing.assert_allclose(op.apply(x), x, atol=1e-15)


def test_avgpool_single_block():
    op = ForwardOperator.avg_pool(2)
    x = np.array([[1.0, 3.0], [5.0, 7.0]])[..., None]
    assert op.apply(x)[0, 0, 0] == 4.0


def test_blur_delta_gives_kernel():
    k = make_gaussian_kernel(5, 1.0)
    op = ForwardOperator("blur", kernel=k)
    x = np.zeros((11, 11, 1))
    x[5, 5, 0] = 1.0
    out = op.apply(x)[..., 0]
    np.testing.assert_allclose(out[3:8, 3:8], k, rtol=0, atol=1e-15)
    assert np.all(np.delete(out.ravel(), [r * 11 + c for r in range(3, 8) for c in range(3, 8)]) == 0)


def test_shape_mismatch_errors():
    op = ForwardOperator.avg_pool(3)
    with pytest.raises(ValueError):
        op.apply(np.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        op.apply(np.zeros((4, 4)))


def _adjoint_gap(op, shape, rng):
    x = rng.standard_normal(shape)
    y = rng.standard_normal(op.output_shape(shape))
    lhs = np.vdot(op.apply(x), y)
    rhs = np.vdot(x, op.adjoint(y))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


@pytest.mark.parametrize(
    "op,shape",
    [
        (ForwardOperator.gaussian_blur(7, 1.5), (16, 16, 1)),
        (ForwardOperator.gaussian_blur(5, 1.0), (9, 12, 3)),
        (ForwardOperator.avg_pool(2), (16, 16, 1)),
        (ForwardOperator.avg_pool(4), (8, 12, 3)),
    ],
)
def test_adjoint_identity_100_trials(op, shape):
    rng = make_rng(11)
    assert max(_adjoint_gap(op, shape, rng) for _ in range(100)) <= 1e-10


def test_sr_adjoint_of_one():
    out = ForwardOperator.avg_pool(2).adjoint(np.ones((1, 1, 1)))
    np.testing.assert_array_equal(out[..., 0], np.full((2, 2), 0.25))


def test_blur_adjoint_interior_matches_rotated_kernel():
    # dense transpose vs an explicit rotated-kernel convolution, away from the border
    k = np.array([[0.0, 0.1, 0.0], [0.2, 0.4, 0.2], [0.0, 0.1, 0.0]])
    op = ForwardOperator("blur", kernel=k)
    M = op.as_dense_matrix((8, 8, 1))
    y = make_rng(2).standard_normal((8, 8, 1))
    adj = (M.T @ y.ravel()).reshape(8, 8)
    np.testing.assert_allclose(op.adjoint(y)[..., 0], adj, atol=1e-14)
    kr = k[::-1, ::-1]
    for i in range(2, 6):
        for j in range(2, 6):
            direct = np.sum(kr * y[i - 1 : i + 2, j - 1 : j + 2, 0])
            assert adj[i, j] == pytest.approx(direct, abs=1e-14)


def test_measure_zero_noise_equals_apply():
    op = ForwardOperator.gaussian_blur(3, 1.0, noise_sigma=0.0)
    x = make_rng(0).uniform(-1, 1, (6, 6, 1))
    assert np.array_equal(op.measure(x, make_rng(1)), op.apply(x))


def test_measure_noise_std():
    op = ForwardOperator.gaussian_blur(3, 1.0, noise_sigma=0.05)
    x = make_rng(0).uniform(-1, 1, (4, 4, 1))
    rng = make_rng(5)
    draws = np.stack([op.measure(x, rng) for _ in range(10_000)])
    std = draws.std(axis=0)
    assert np.all(np.abs(std - 0.05) <= 0.002)


def test_measure_same_seed_same_noise():
    op = ForwardOperator.avg_pool(2, noise_sigma=0.05)
    x = np.zeros((4, 4, 1))
    assert np.array_equal(op.measure(x, make_rng(9, 1)), op.measure(x, make_rng(9, 1)))


def test_identity_kernel_dense_is_identity():
    op = ForwardOperator.gaussian_blur(1, 1.0)
    assert np.array_equal(op.as_dense_matrix((4, 3, 2)), np.eye(24))


def test_dense_columns_are_basis_images():
    op = ForwardOperator.gaussian_blur(3, 0.8)
    shape = (5, 4, 1)
    M = op.as_dense_matrix(shape)
    for k in range(20):
        e = np.zeros(20)
        e[k] = 1.0
        np.testing.assert_array_equal(M[:, k], op.apply(e.reshape(shape)).ravel())


def test_avgpool_dense_row_sums():
    M = ForwardOperator.avg_pool(2).as_dense_matrix((4, 4, 1))
    np.testing.assert_allclose(M.sum(axis=1), 1.0, rtol=0, atol=1e-15)


def test_dense_cap():
    with pytest.raises(ValueError):
        ForwardOperator.avg_pool(2).as_dense_matrix((64, 64, 2))


@given(st.integers(3, 10), st.integers(3, 10), st.integers(0, 2**31))
def test_dense_agrees_with_apply(h, w, seed):
    op = ForwardOperator.gaussian_blur(3, 0.9)
    x = make_rng(seed).standard_normal((h, w, 1))
    M = op.as_dense_matrix((h, w, 1))
    np.testing.assert_allclose(M @ x.ravel(), op.apply(x).ravel(), rtol=0, atol=1e-12)


@given(st.integers(4, 12), st.integers(0, 2**31))
def test_blur_preserves_mean(n, seed):
    op = ForwardOperator.gaussian_blur(3, 1.1)
    x = make_rng(seed).standard_normal((n, n + 1, 2))
    assert abs(op.apply(x).mean() - x.mean()) <= 1e-10


def test_lift_replicates_blocks():
    op = ForwardOperator.avg_pool(2)
    y = np.arange(4.0).reshape(2, 2, 1)
    up = op.lift(y)
    assert up.shape == (4, 4, 1)
    np.testing.assert_array_equal(op.apply(up), y)
