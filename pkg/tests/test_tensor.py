import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsnn.tensor import ConvSpec, DomainError, conv2d, relu, transpose_conv2d


def naive_conv(x, k, b, stride, pad):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=np.result_type(x, k))
    for i in range(n):
        for j in range(o):
            for y in range(oh):
                for z in range(ow):
                    acc = b[j]
                    for ci in range(c):
                        for dy in range(kh):
                            for dz in range(kw):
                                acc += xp[i, ci, y * stride + dy, z * stride + dz] * k[j, ci, dy, dz]
                    out[i, j, y, z] = acc
    return out


def zero_insertion_tconv(x, k, b, stride, pad):
    """Transpose conv as: dilate input with zeros, pad by k-1-pad, correlate with the flipped kernel."""
    n, c, h, w = x.shape
    kh, kw = k.shape[2:]
    dil = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    dil[:, :, ::stride, ::stride] = x
    ph, pw = kh - 1 - pad, kw - 1 - pad
    dil = np.pad(dil, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return naive_conv(dil, k[:, :, ::-1, ::-1], b, 1, 0)


class TestConv2d:
    def test_sum_of_ones(self):
        spec = ConvSpec("conv", np.ones((1, 1, 3, 3)), np.zeros(1))
        assert conv2d(np.ones((1, 1, 3, 3)), spec).item() == 9.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 4))
        spec = ConvSpec("conv", np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(conv2d(x, spec), x)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        k, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out = conv2d(x, ConvSpec("strided_conv", k, b, stride=2, padding=1))
        assert np.abs(out - naive_conv(x, k, b, 2, 1)).max() <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
           st.integers(0, 2), st.integers(3, 8), st.integers(0, 2**31 - 1))
    def test_random_instances(self, cin, cout, k, stride, pad, hw, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, cin, hw, hw))
        kern, b = rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
        out = conv2d(x, ConvSpec("conv", kern, b, stride, pad))
        assert np.abs(out - naive_conv(x, kern, b, stride, pad)).max() <= 1e-12

    def test_integer_domain_exact(self, rng):
        x = rng.integers(-50, 50, size=(2, 3, 6, 6)).astype(np.int32)
        k = rng.integers(-7, 8, size=(4, 3, 3, 3)).astype(np.int32)
        b = rng.integers(-100, 100, size=4).astype(np.int32)
        out = conv2d(x, ConvSpec("conv", k, b, 1, 1))
        assert out.dtype == np.int32
        np.testing.assert_array_equal(out, naive_conv(x.astype(np.int64), k.astype(np.int64), b.astype(np.int64), 1, 1))

    def test_integer_overflow_detected(self):
        x = np.full((1, 1, 2, 2), 2**30, dtype=np.int32)
        spec = ConvSpec("conv", np.full((1, 1, 2, 2), 2, dtype=np.int32), np.zeros(1, dtype=np.int32))
        with pytest.raises(OverflowError):
            conv2d(x, spec)

    def test_linearity(self, rng):
        k = rng.normal(size=(3, 2, 3, 3))
        spec = ConvSpec("conv", k, np.zeros(3), 1, 1)
        x, y = rng.normal(size=(2, 2, 2, 6, 6))
        lhs = conv2d(1.5 * x - 0.7 * y, spec)
        rhs = 1.5 * conv2d(x, spec) - 0.7 * conv2d(y, spec)
        assert np.abs(lhs - rhs).max() <= 1e-12

    def test_channel_mismatch_names_dimension(self):
        spec = ConvSpec("conv", np.ones((1, 2, 1, 1)), np.zeros(1))
        with pytest.raises(ValueError, match="channel"):
            conv2d(np.ones((1, 3, 4, 4)), spec)

    def test_domain_mismatch(self):
        spec = ConvSpec("conv", np.ones((1, 1, 1, 1), dtype=np.int32), np.zeros(1, dtype=np.int32))
        with pytest.raises(DomainError):
            conv2d(np.ones((1, 1, 2, 2)), spec)

    def test_not_4d(self):
        with pytest.raises(ValueError, match="4-D"):
            conv2d(np.ones((3, 3)), ConvSpec("conv", np.ones((1, 1, 1, 1)), np.zeros(1)))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ConvSpec("conv", np.ones((2, 1, 1, 1)), np.zeros(3))
        with pytest.raises(ValueError):
            ConvSpec("conv", np.ones((1, 1, 1, 1)), np.zeros(1), stride=0)
        with pytest.raises(ValueError):
            ConvSpec("dilated", np.ones((1, 1, 1, 1)), np.zeros(1))


class TestTransposeConv:
    def test_shape(self):
        out = transpose_conv2d(np.ones((1, 1, 2, 2)), ConvSpec("transpose_conv", np.ones((1, 1, 2, 2)), np.zeros(1), 2))
        assert out.shape == (1, 1, 4, 4)

    def test_single_tap(self, rng):
        k = rng.normal(size=(1, 1, 2, 2))
        out = transpose_conv2d(np.full((1, 1, 1, 1), 0.7), ConvSpec("transpose_conv", k, np.zeros(1), 1))
        np.testing.assert_allclose(out[0, 0], 0.7 * k[0, 0], rtol=0, atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
           st.integers(1, 6), st.integers(0, 2**31 - 1), st.data())
    def test_matches_zero_insertion(self, cin, cout, k, stride, hw, seed, data):
        pad = data.draw(st.integers(0, k - 1))
        if (hw - 1) * stride - 2 * pad + k < 1:
            return
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, cin, hw, hw))
        kern, b = rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
        out = conv2d(x, ConvSpec("transpose_conv", kern, b, stride, pad))
        assert out.shape[2] == (hw - 1) * stride - 2 * pad + k
        assert np.abs(out - zero_insertion_tconv(x, kern, b, stride, pad)).max() <= 1e-12

    def test_integer_domain(self, rng):
        x = rng.integers(-9, 10, size=(1, 2, 3, 3)).astype(np.int32)
        k = rng.integers(-7, 8, size=(2, 2, 3, 3)).astype(np.int32)
        b = np.arange(2, dtype=np.int32)
        out = conv2d(x, ConvSpec("transpose_conv", k, b, 2, 1))
        ref = zero_insertion_tconv(x.astype(np.int64), k.astype(np.int64), b.astype(np.int64), 2, 1)
        np.testing.assert_array_equal(out, ref)

    def test_wrong_kind(self):
        with pytest.raises(ValueError):
            transpose_conv2d(np.ones((1, 1, 2, 2)), ConvSpec("conv", np.ones((1, 1, 1, 1)), np.zeros(1)))


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_all_negative(self, rng):
        assert not relu(-np.abs(rng.normal(size=20)) - 1e-3).any()

    def test_idempotent(self, rng):
        x = rng.normal(size=50)
        np.testing.assert_array_equal(relu(relu(x)), relu(x))
