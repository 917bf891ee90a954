"""Structured ops: convolution oracle, norm, pooling, shuffling, windows."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmlt.errors import ShapeError
from lmlt.ops import (
    ConvSpec,
    conv2d,
    crop,
    gelu,
    layer_norm,
    pad_to_grid,
    pixel_shuffle,
    pixel_unshuffle,
    pool_half,
    upsample2x,
    window_partition,
    window_reverse,
)
from lmlt.rng import Rng
from lmlt.tensor import Tensor, backward, fd_gradcheck, fresh_tape, sum_all, mul
from tests.conftest import rand_tensor


def _reflect(i: int, n: int) -> int:
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def conv_oracle(x, w, b, groups=1):
    """Naive 7-loop same-padding reflect convolution."""
    n, ci, h, ww = x.shape
    co, cig, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, co, h, ww))
    for ni in range(n):
        for oc in range(co):
            ic_range = [oc] if groups != 1 else range(ci)
            for y in range(h):
                for xx in range(ww):
                    acc = 0.0
                    for idx, ic in enumerate(ic_range):
                        wslice = w[oc, 0] if groups != 1 else w[oc, ic]
                        for dy in range(k):
                            for dx in range(k):
                                sy = _reflect(y + dy - p, h)
                                sx = _reflect(xx + dx - p, ww)
                                acc += x[ni, ic, sy, sx] * wslice[dy, dx]
                    out[ni, oc, y, xx] = acc + (b[oc] if b is not None else 0.0)
    return out


class TestConv:
    def test_identity_1x1(self, rng):
        x = rand_tensor(rng, (1, 3, 5, 5))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = conv2d(x, w, None, ConvSpec(3, 3, 1, bias=False))
        np.testing.assert_allclose(out.data, x.data, rtol=1e-12)

    def test_averaging_preserves_constant(self):
        x = Tensor(np.full((1, 1, 6, 6), 2.5))
        w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        out = conv2d(x, w, None, ConvSpec(1, 1, 3, bias=False))
        np.testing.assert_allclose(out.data, 2.5, rtol=1e-7)

    def test_naive_oracle(self, rng):
        x = rand_tensor(rng, (1, 3, 5, 5))
        w = rand_tensor(rng, (4, 3, 3, 3))
        b = rand_tensor(rng, (4,))
        out = conv2d(x, w, b, ConvSpec(3, 4, 3))
        ref = conv_oracle(x.data, w.data, b.data)
        scale = np.abs(ref).max()
        assert np.abs(out.data - ref).max() / scale < 1e-10

    def test_depthwise_oracle(self, rng):
        x = rand_tensor(rng, (2, 4, 6, 5))
        w = rand_tensor(rng, (4, 1, 3, 3))
        out = conv2d(x, w, None, ConvSpec(4, 4, 3, groups=4, bias=False))
        ref = conv_oracle(x.data, w.data, None, groups=4)
        assert np.abs(out.data - ref).max() / np.abs(ref).max() < 1e-10

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv2d(rand_tensor(rng, (1, 2, 4, 4)), rand_tensor(rng, (3, 3, 3, 3)), None,
                   ConvSpec(3, 3, 3, bias=False))

    def test_grad(self, rng):
        w = rand_tensor(rng, (2, 2, 3, 3))

        def f(t):
            return sum_all(mul(conv2d(t, w, None, ConvSpec(2, 2, 3, bias=False)), t))

        report = fd_gradcheck(f, rand_tensor(rng, (1, 2, 4, 4)), eps=1e-5, tol=1e-4)
        assert report.passed, str(report)

    def test_weight_grad(self, rng):
        x = rand_tensor(rng, (1, 2, 4, 4))

        def f(t):
            return sum_all(mul(conv2d(x, t, None, ConvSpec(2, 2, 3, bias=False)), Tensor(x.data[:, :1] + 1.0)))

        report = fd_gradcheck(f, rand_tensor(rng, (2, 2, 3, 3)), eps=1e-5, tol=1e-4)
        assert report.passed, str(report)


class TestLayerNorm:
    def test_constant_channels_give_beta(self, rng):
        x = Tensor(np.full((1, 4, 3, 3), 7.0))
        gamma = Tensor(np.ones(4))
        beta = Tensor(np.arange(4.0))
        out = layer_norm(x, gamma, beta)
        np.testing.assert_allclose(out.data, np.broadcast_to(np.arange(4.0)[None, :, None, None], out.shape), atol=1e-6)

    def test_two_channel_closed_form(self):
        x = Tensor(np.stack([np.full((2, 2), 1.0), np.full((2, 2), 3.0)])[None])
        out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data[0, 0], -1.0, atol=1e-3)
        np.testing.assert_allclose(out.data[0, 1], 1.0, atol=1e-3)

    def test_unit_stats(self, rng):
        x = rand_tensor(rng, (2, 8, 4, 4), -2, 2)
        out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        mean = out.mean(axis=1)
        var = out.var(axis=1)
        assert np.abs(mean).max() < 1e-6
        assert (var > 1 - 1e-3).all() and (var < 1 + 1e-3).all()

    def test_grad(self, rng):
        gamma = rand_tensor(rng, (3,), 0.5, 1.5)
        beta = rand_tensor(rng, (3,))
        w = rand_tensor(rng, (1, 3, 2, 2))

        def f(t):
            return sum_all(mul(layer_norm(t, gamma, beta), w))

        report = fd_gradcheck(f, rand_tensor(rng, (1, 3, 2, 2)), eps=1e-5, tol=1e-4)
        assert report.passed, str(report)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor(np.full((1, 1, 1, 1), 10.0), dtype=np.float64)).item() - 10.0) < 1e-6

    def test_value_at_one(self):
        got = gelu(Tensor(np.ones((1, 1, 1, 1)), dtype=np.float64)).item()
        ref = 1.0 * 0.5 * (1 + math.erf(1.0 / math.sqrt(2)))
        assert abs(got - ref) < 1e-12
        assert abs(got - 0.8413447) < 1e-7

    def test_grad(self, rng):
        report = fd_gradcheck(lambda t: sum_all(gelu(t)), rand_tensor(rng, (2, 3)), eps=1e-5, tol=1e-4)
        assert report.passed, str(report)


class TestPool:
    def test_avg(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        assert pool_half(x, "avg").item() == 2.5

    def test_max(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        assert pool_half(x, "max").item() == 4.0

    def test_constants_preserved_twice(self):
        x = Tensor(np.full((1, 1, 8, 8), 1.25))
        out = pool_half(pool_half(x, "avg"), "avg")
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 1.25))

    def test_odd_dims_error(self, rng):
        with pytest.raises(ShapeError):
            pool_half(rand_tensor(rng, (1, 1, 3, 4)))

    def test_grads(self, rng):
        for mode in ("avg", "max"):
            report = fd_gradcheck(
                lambda t: sum_all(mul(pool_half(t, mode), pool_half(t, mode))),
                rand_tensor(rng, (1, 2, 4, 4)),
                eps=1e-5,
                tol=1e-4,
            )
            assert report.passed, f"{mode}: {report}"


class TestUpsample:
    def test_nearest_single(self):
        out = upsample2x(Tensor(np.array([[5.0]])[None, None]), "nearest")
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_nearest_inverts_avg_on_constants(self):
        x = Tensor(np.full((1, 2, 4, 4), 0.3))
        out = upsample2x(pool_half(x, "avg"), "nearest")
        np.testing.assert_array_equal(out.data, x.data)

    def test_bilinear_half_pixel(self):
        out = upsample2x(Tensor(np.array([[0.0, 2.0]])[None, None], dtype=np.float64), "bilinear")
        np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-12)
        np.testing.assert_allclose(out.data[0, 0, 1], [0.0, 0.5, 1.5, 2.0], atol=1e-12)

    def test_grads(self, rng):
        for mode in ("nearest", "bilinear"):
            report = fd_gradcheck(
                lambda t: sum_all(mul(upsample2x(t, mode), upsample2x(t, mode))),
                rand_tensor(rng, (1, 2, 3, 4)),
                eps=1e-5,
                tol=1e-4,
            )
            assert report.passed, f"{mode}: {report}"


class TestPixelShuffle:
    def test_definition(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = pixel_shuffle(x, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_bijection(self, rng):
        x = rand_tensor(rng, (2, 12, 3, 5))
        np.testing.assert_array_equal(pixel_unshuffle(pixel_shuffle(x, 2), 2).data, x.data)

    def test_multiset_preserved(self, rng):
        x = rand_tensor(rng, (1, 9, 2, 2))
        out = pixel_shuffle(x, 3)
        np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(x.data.ravel()))

    def test_divisibility_error(self, rng):
        with pytest.raises(ShapeError):
            pixel_shuffle(rand_tensor(rng, (1, 6, 2, 2)), 2)


class TestPadToGrid:
    def test_no_padding_needed(self, rng):
        x = rand_tensor(rng, (1, 1, 64, 64))
        out, grid = pad_to_grid(x, 8, 4)
        assert out.shape == (1, 1, 64, 64)
        assert (grid.pad_h, grid.pad_w) == (0, 0)
        assert grid.rows * grid.cols == 64

    def test_60_to_64(self, rng):
        x = rand_tensor(rng, (1, 1, 60, 60))
        out, grid = pad_to_grid(x, 8, 4)
        assert out.shape == (1, 1, 64, 64)
        assert (grid.pad_h, grid.pad_w) == (4, 4)

    @given(st.integers(1, 129), st.integers(1, 129))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip(self, h, w):
        x = Tensor(Rng(h * 200 + w).uniforms(h * w).reshape(1, 1, h, w))
        padded, grid = pad_to_grid(x, 8, 3)
        assert padded.shape[2] % 32 == 0 and padded.shape[3] % 32 == 0
        np.testing.assert_array_equal(crop(padded, h, w).data, x.data)

    def test_pad_grad(self, rng):
        def f(t):
            padded, _ = pad_to_grid(t, 4, 2)
            return sum_all(mul(padded, padded))

        report = fd_gradcheck(f, rand_tensor(rng, (1, 1, 5, 3)), eps=1e-5, tol=1e-4)
        assert report.passed, str(report)


class TestWindows:
    def test_single_window(self, rng):
        x = rand_tensor(rng, (1, 3, 4, 4))
        wins = window_partition(x, 4)
        assert wins.shape == (1, 16, 3)
        np.testing.assert_array_equal(wins.data[0], x.data[0].reshape(3, 16).T)

    def test_roundtrip(self, rng):
        x = rand_tensor(rng, (2, 5, 8, 12))
        back = window_reverse(window_partition(x, 4), 4, 8, 12)
        np.testing.assert_array_equal(back.data, x.data)

    def test_windows_tile_disjointly(self, rng):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        wins = window_partition(x, 2).data
        seen = np.sort(wins.ravel())
        np.testing.assert_array_equal(seen, np.arange(16.0))
        np.testing.assert_array_equal(wins[0].ravel(), [0, 1, 4, 5])

    def test_divisibility_error(self, rng):
        with pytest.raises(ShapeError):
            window_partition(rand_tensor(rng, (1, 1, 6, 6)), 4)
