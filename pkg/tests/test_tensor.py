import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from credassign import tensor as T
from credassign.errors import DimensionError, DomainError


def naive_conv(x, k, stride=1, pad=0):
    n, c, h, w = x.shape
    co, ci, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0
                    for ch in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, ch, y * stride + i, z * stride + j] * k[o, ch, i, j]
                    out[b, o, y, z] = acc
    return out


def toeplitz_matrix(kernel, in_hw):
    """Dense (d_out, d_in) matrix of a stride-1, unpadded cross-correlation."""
    co, ci, kh, kw = kernel.shape
    h, w = in_hw
    oh, ow = h - kh + 1, w - kw + 1
    m = np.zeros((co * oh * ow, ci * h * w))
    for o in range(co):
        for y in range(oh):
            for z in range(ow):
                row = (o * oh + y) * ow + z
                for ch in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            m[row, (ch * h + y + i) * w + z + j] = kernel[o, ch, i, j]
    return m


class TestConv2d:
    def test_ones(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_scalar_kernel(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.conv2d(x, np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_array_equal(out[0, 0], [[2, 4], [6, 8]])

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
        out = T.conv2d(x, k)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out, naive_conv(x.astype(float), k.astype(float)), atol=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 2), ci=st.integers(1, 3), co=st.integers(1, 3),
           k=st.integers(1, 4), extra=st.integers(0, 4), stride=st.integers(1, 2), pad=st.integers(0, 2),
           seed=st.integers(0, 2**16))
    def test_property_matches_loop(self, n, ci, co, k, extra, stride, pad, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((n, ci, k + extra, k + extra + 1))
        kern = r.standard_normal((co, ci, k, k))
        np.testing.assert_allclose(T.conv2d(x, kern, stride, pad), naive_conv(x, kern, stride, pad),
                                   atol=1e-10)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.ones((1, 2, 5, 5)), np.ones((1, 3, 3, 3)))
        with pytest.raises(DimensionError):
            T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


class TestConvTransposed:
    def test_delta_input_places_kernel(self, rng):
        k = rng.standard_normal((1, 1, 3, 3))
        out = T.conv2d_transposed(np.ones((1, 1, 1, 1)), k)
        np.testing.assert_array_equal(out[0, 0], k[0, 0])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_adjoint_float32(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        y = T.conv2d(x, k, stride, pad)
        g = rng.standard_normal(y.shape).astype(np.float32)
        lhs = np.vdot(y.astype(np.float64), g)
        rhs = np.vdot(x.astype(np.float64), T.conv2d_transposed(g, k, stride, pad, (9, 9)))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

    @settings(max_examples=25, deadline=None)
    @given(ci=st.integers(1, 3), co=st.integers(1, 3), k=st.integers(1, 4), extra=st.integers(0, 5),
           stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 2**16))
    def test_adjoint_float64(self, ci, co, k, extra, stride, pad, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, ci, k + extra, k + extra))
        kern = r.standard_normal((co, ci, k, k))
        y = T.conv2d(x, kern, stride, pad)
        g = r.standard_normal(y.shape)
        back = T.conv2d_transposed(g, kern, stride, pad, x.shape[2:])
        assert abs(np.vdot(y, g) - np.vdot(x, back)) <= 1e-10 * max(1.0, abs(np.vdot(y, g)))

    def test_matches_materialized_toeplitz(self, rng):
        k = rng.standard_normal((1, 1, 3, 3))
        x = rng.standard_normal((1, 1, 4, 4))
        m = toeplitz_matrix(k, (4, 4))
        np.testing.assert_allclose(T.conv2d(x, k).ravel(), m @ x.ravel(), atol=1e-12)
        g = rng.standard_normal((1, 1, 2, 2))
        np.testing.assert_allclose(T.conv2d_transposed(g, k).ravel(), m.T @ g.ravel(), atol=1e-12)

    def test_col2im_is_adjoint_of_im2col(self, rng):
        x = rng.standard_normal((2, 3, 7, 7))
        cols = T.im2col(x, 3, 3, 2, 1)
        c = rng.standard_normal(cols.shape)
        back = T.col2im(c, x.shape, 3, 3, 2, 1)
        assert np.vdot(cols, c) == pytest.approx(np.vdot(x, back), rel=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d_transposed(np.ones((1, 2, 2, 2)), np.ones((3, 1, 3, 3)))


class TestMaxPool:
    def test_single_window(self):
        out, idx = T.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out[0, 0, 0, 0] == 4.0
        assert idx[0, 0, 0, 0] == 3  # row 1, col 1

    def test_constant_ties_to_first(self):
        out, idx = T.maxpool2d(np.full((1, 1, 4, 4), 7.0))
        assert np.all(out == 7.0)
        assert np.all(idx == 0)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        out, idx = T.maxpool2d(x)
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    win = x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    assert out[0, c, i, j] == win.max()
                    assert idx[0, c, i, j] == int(np.argmax(win))

    def test_backward_routes_to_argmax(self, rng):
        x = rng.standard_normal((2, 3, 6, 8))
        out, idx = T.maxpool2d(x)
        g = rng.standard_normal(out.shape)
        back = T.maxpool2d_backward(g, idx, x.shape)
        assert back.sum() == pytest.approx(g.sum())
        winners = np.isclose(x, np.repeat(np.repeat(out, 2, axis=2), 2, axis=3))
        assert np.all(back[~winners] == 0)
        assert np.count_nonzero(back) == g.size

    def test_odd_size(self):
        with pytest.raises(DimensionError):
            T.maxpool2d(np.ones((1, 1, 5, 4)))


class TestLoss:
    def test_uniform_logits(self):
        loss, _ = T.softmax_cross_entropy(np.zeros((4, 10)), [0, 3, 9, 5])
        assert loss == pytest.approx(math.log(10))

    def test_gradient_rows_sum_to_zero(self, rng):
        _, d = T.softmax_cross_entropy(rng.standard_normal((5, 10)), rng.integers(0, 10, 5))
        np.testing.assert_allclose(d.sum(axis=1), 0, atol=1e-12)

    def test_finite_differences(self, rng):
        logits = rng.standard_normal((3, 10))
        labels = np.array([1, 7, 4])
        _, d = T.softmax_cross_entropy(logits, labels)
        h = 1e-3
        fd = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            p, m = logits.copy(), logits.copy()
            p[idx] += h
            m[idx] -= h
            fd[idx] = (T.softmax_cross_entropy(p, labels)[0] - T.softmax_cross_entropy(m, labels)[0]) / (2 * h)
        assert np.linalg.norm(d - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_label_domain(self):
        with pytest.raises(DomainError):
            T.softmax_cross_entropy(np.zeros((1, 10)), [10])
        with pytest.raises(DomainError):
            T.softmax_cross_entropy(np.zeros((1, 10)), [-1])

    def test_relu_mask(self):
        u = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.relu(u), [0, 0, 2])
        np.testing.assert_array_equal(T.relu_backward_mask(u), [0, 0, 1])

    def test_matmul_shape(self):
        with pytest.raises(DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestRandom:
    def test_deterministic(self):
        a = T.randn(T.make_rng(42, "feedback"), (5, 5), 0.05)
        b = T.randn(T.make_rng(42, "feedback"), (5, 5), 0.05)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, T.randn(T.make_rng(42, "init"), (5, 5), 0.05))

    def test_moments(self):
        sigma = 0.05
        x = T.randn(T.make_rng(7), (100_000,), sigma, np.float64)
        # mean bound is loose by design; std within 2% of sigma
        assert abs(x.mean()) < 0.02
        assert abs(x.std() - sigma) < 0.02 * sigma

    def test_dtype_builds_share_draws(self):
        a = T.randn(T.make_rng(3), (10,), 0.1, np.float32)
        b = T.randn(T.make_rng(3), (10,), 0.1, np.float64)
        np.testing.assert_array_equal(a, b.astype(np.float32))

    def test_sigma_positive(self):
        with pytest.raises(DomainError):
            T.randn(T.make_rng(0), (2,), 0.0)

    def test_derive_seed_stable(self):
        assert T.derive_seed(42, "epoch1") == T.derive_seed(42, "epoch1")
        assert T.derive_seed(42, "epoch1") != T.derive_seed(42, "epoch2")
        assert 0 <= T.derive_seed(42, "x") < 2**63

    def test_check_finite(self):
        from credassign.errors import NonFiniteError
        with pytest.raises(NonFiniteError):
            T.check_finite(np.array([1.0, np.nan]))
