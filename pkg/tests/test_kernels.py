"""Kernels: backend equivalence, fixed-point rules, simple-op semantics."""

import numpy as np
import pytest

from ncpkit import kernels
from ncpkit.kernels import (
    add_sat,
    backend,
    conv2d,
    downsample2,
    dwconv2d,
    global_avg,
    maxpool2,
    postprocess,
    upsample2,
)

BACKENDS = ["numpy"] + (["numba"] if backend() == "numba" else [])


def rand_i8(rng, shape):
    return rng.integers(-128, 128, size=shape, dtype=np.int64).astype(np.int8)


@pytest.mark.parametrize("impl", BACKENDS)
class TestConv:
    def test_identity_1x1(self, impl):
        rng = np.random.default_rng(0)
        x = rand_i8(rng, (1, 6, 6))
        w = np.ones((1, 1, 1, 1), dtype=np.int8)
        y = conv2d(x, w, 1, np.ones(1), np.zeros(1), True, False, impl=impl)
        assert np.array_equal(y, x)

    def test_zero_weights_give_rounded_bias(self, impl):
        rng = np.random.default_rng(1)
        x = rand_i8(rng, (3, 5, 5))
        w = np.zeros((2, 3, 3, 3), dtype=np.int8)
        y = conv2d(x, w, 1, np.ones(2), np.array([1.5, -0.5]), True, False,
                   impl=impl)
        assert np.all(y[0] == 2)   # 1.5 rounds half-even to 2
        assert np.all(y[1] == 0)   # -0.5 rounds half-even to 0

    def test_saturation(self, impl):
        x = np.full((1, 4, 4), 127, dtype=np.int8)
        w = np.full((1, 1, 1, 1), 127, dtype=np.int8)
        y = conv2d(x, w, 1, impl=impl)
        assert np.all(y == 127)
        y = conv2d(x, -w, 1, impl=impl)
        assert np.all(y == -128)

    @pytest.mark.parametrize("k,stride,ih,iw", [
        (1, 1, 5, 7), (1, 2, 5, 7), (3, 1, 5, 7), (3, 2, 5, 7),
        (3, 2, 8, 8), (3, 1, 1, 1), (3, 2, 9, 3),
    ])
    def test_output_sizing(self, impl, k, stride, ih, iw):
        rng = np.random.default_rng(2)
        x = rand_i8(rng, (2, ih, iw))
        w = rand_i8(rng, (3, 2, k, k))
        y = conv2d(x, w, stride, impl=impl)
        assert y.shape == (3, -(-ih // stride), -(-iw // stride))


@pytest.mark.parametrize("impl", BACKENDS)
class TestDwconv:
    def test_identity_kernel(self, impl):
        rng = np.random.default_rng(3)
        x = rand_i8(rng, (4, 6, 6))
        w = np.zeros((4, 3, 3), dtype=np.int8)
        w[:, 1, 1] = 1
        y = dwconv2d(x, w, 1, np.ones(4), np.zeros(4), True, False, impl=impl)
        assert np.array_equal(y, x)

    def test_all_zero_weights(self, impl):
        rng = np.random.default_rng(4)
        x = rand_i8(rng, (2, 4, 4))
        w = np.zeros((2, 3, 3), dtype=np.int8)
        y = dwconv2d(x, w, 1, np.ones(2), np.array([0.5, 3.0]), True, False,
                     impl=impl)
        assert np.all(y[0] == 0)  # 0.5 rounds to 0 (half-even)
        assert np.all(y[1] == 3)


@pytest.mark.skipif(backend() != "numba", reason="numba backend unavailable")
class TestBackendEquivalence:
    @pytest.mark.parametrize("seed", range(12))
    def test_conv_backends_bit_identical(self, seed):
        rng = np.random.default_rng(seed)
        ic, oc = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        k = int(rng.choice((1, 3)))
        stride = int(rng.integers(1, 3))
        ih, iw = int(rng.integers(1, 15)), int(rng.integers(1, 15))
        x = rand_i8(rng, (ic, ih, iw))
        w = rand_i8(rng, (oc, ic, k, k))
        scale = rng.uniform(0.001, 0.2, oc).astype(np.float32)
        bias = rng.uniform(-2, 2, oc).astype(np.float32)
        bn, relu = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
        a = conv2d(x, w, stride, scale, bias, bn, relu, impl="numpy")
        b = conv2d(x, w, stride, scale, bias, bn, relu, impl="numba")
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("seed", range(12))
    def test_dwconv_backends_bit_identical(self, seed):
        rng = np.random.default_rng(100 + seed)
        c = int(rng.integers(1, 40))
        stride = int(rng.integers(1, 3))
        ih, iw = int(rng.integers(1, 15)), int(rng.integers(1, 15))
        x = rand_i8(rng, (c, ih, iw))
        w = rand_i8(rng, (c, 3, 3))
        scale = rng.uniform(0.001, 0.2, c).astype(np.float32)
        bias = rng.uniform(-2, 2, c).astype(np.float32)
        bn, relu = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
        a = dwconv2d(x, w, stride, scale, bias, bn, relu, impl="numpy")
        b = dwconv2d(x, w, stride, scale, bias, bn, relu, impl="numba")
        assert np.array_equal(a, b)


class TestPostprocess:
    def test_bn_relu_example(self):
        out = postprocess(np.array([[10]]), np.array([0.5]), np.array([1.0]),
                          bn_en=True, relu_en=True)
        assert out[0, 0] == 6

    def test_relu_clamps_negative(self):
        assert postprocess(np.array([[-3]]), relu_en=True)[0, 0] == 0

    def test_saturates_positive(self):
        assert postprocess(np.array([[300]]))[0, 0] == 127

    def test_round_half_even(self):
        acc = np.array([[1], [3], [5]])
        out = postprocess(acc, np.array([0.5, 0.5, 0.5]), np.zeros(3), bn_en=True)
        assert out.reshape(-1).tolist() == [0, 2, 2]


class TestSimpleOps:
    def test_add_saturates(self):
        a = np.array([[[100]]], dtype=np.int8)
        assert add_sat(a, a)[0, 0, 0] == 127
        assert add_sat(-a, -a)[0, 0, 0] == -128

    def test_downsample_keeps_top_left(self):
        x = np.arange(16, dtype=np.int8).reshape(1, 4, 4)
        y = downsample2(x)
        assert y.reshape(-1).tolist() == [0, 2, 8, 10]

    def test_upsample_nearest(self):
        x = np.array([[[1, 2], [3, 4]]], dtype=np.int8)
        y = upsample2(x)
        assert y[0, 0].tolist() == [1, 1, 2, 2]
        assert y[0, 3].tolist() == [3, 3, 4, 4]

    def test_maxpool_quad(self):
        x = np.array([[[1, 5], [3, 2]]], dtype=np.int8)
        assert maxpool2(x)[0, 0, 0] == 5

    def test_maxpool_ragged_edge(self):
        x = np.array([[[1, 2, 9], [3, 4, -7]]], dtype=np.int8)
        y = maxpool2(x)
        assert y.shape == (1, 1, 2)
        assert y.reshape(-1).tolist() == [4, 9]

    def test_gap_constant(self):
        x = np.full((3, 5, 5), 7, dtype=np.int8)
        assert np.all(global_avg(x) == 7)

    def test_gap_rounds_half_even(self):
        x = np.zeros((1, 1, 2), dtype=np.int8)
        x[0, 0] = [1, 0]  # mean 0.5 -> 0
        assert global_avg(x)[0, 0, 0] == 0
        x[0, 0] = [3, 0]  # mean 1.5 -> 2
        assert global_avg(x)[0, 0, 0] == 2
