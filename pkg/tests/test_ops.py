"""Neural ops against hand values, naive oracles, and finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glod.tensor import Tensor, Tape, ShapeError, backward, gelu
from glod.ops import (
    ConvSpec, batch_norm, bilinear_upsample, conv2d, layer_norm, linear,
    max_pool2d_same, pixel_shuffle, reduce,
)
from glod.gradcheck import finite_diff_check

from oracles import conv2d_naive, max_pool_same_naive, pixel_shuffle_naive


def t64(a, rg=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=rg)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        np.testing.assert_array_equal(conv2d(x, w).data, x.data)

    def test_ones_kernel_sums_window(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        w = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 10.0

    def test_dilated_row_kernel_vs_naive(self):
        x = t64(np.array([[1, 2, 3, 4, 5]], dtype=float)[None])
        w = t64(np.ones((1, 1, 1, 3)))
        out = conv2d(x, w, dilation=2, padding=(0, 2))
        ref = conv2d_naive(x.data, w.data, dilation=2, padding=(0, 2))
        np.testing.assert_array_equal(out.data, ref)

    @pytest.mark.parametrize("cin,cout,k,stride,pad,dil,groups", [
        (3, 4, (3, 3), 1, 1, 1, 1),
        (4, 4, (1, 3), 1, (0, 1), 1, 1),
        (4, 4, (3, 1), 1, (1, 0), 1, 1),
        (4, 6, (3, 3), 2, 1, 1, 2),
        (6, 6, (3, 3), 1, 2, 2, 6),
        (5, 7, (2, 4), 2, (1, 3), 2, 1),
    ])
    def test_matches_naive_oracle_exactly_real64(self, cin, cout, k, stride, pad, dil, groups):
        rng = np.random.default_rng(hash((cin, cout, k, stride)) % 2**31)
        x = t64(rng.standard_normal((cin, 9, 8)))
        w = t64(rng.standard_normal((cout, cin // groups, *k)))
        b = t64(rng.standard_normal(cout))
        out = conv2d(x, w, b, stride=stride, padding=pad, dilation=dil, groups=groups)
        ref = conv2d_naive(x.data, w.data, b.data, stride=stride, padding=pad,
                           dilation=dil, groups=groups)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)

    def test_depthwise_equals_per_channel_naive_exactly(self):
        rng = np.random.default_rng(11)
        x = t64(rng.standard_normal((4, 6, 6)))
        w = t64(rng.standard_normal((4, 1, 3, 3)))
        out = conv2d(x, w, padding=1, groups=4)
        ref = conv2d_naive(x.data, w.data, padding=1, groups=4)
        np.testing.assert_array_equal(out.data, ref)

    def test_gradients_fd(self):
        rng = np.random.default_rng(12)
        x = t64(rng.standard_normal((3, 5, 5)))
        w = t64(rng.standard_normal((4, 3, 3, 3)), rg=True)
        b = t64(rng.standard_normal(4), rg=True)
        probe = rng.standard_normal((4, 5, 5))

        def loss_x(t):
            return (conv2d(t, w, b, padding=1) * Tensor(probe)).sum()

        assert finite_diff_check(loss_x, x) < 1e-7
        assert finite_diff_check(
            lambda t: (conv2d(x, t, b, padding=1) * Tensor(probe)).sum(), w) < 1e-7
        assert finite_diff_check(
            lambda t: (conv2d(x, w, t, padding=1) * Tensor(probe)).sum(), b) < 1e-8

    def test_group_mismatch_raises(self):
        x = Tensor(np.zeros((5, 4, 4)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(ShapeError, match="channels 5"):
            conv2d(x, w, groups=2)

    def test_weight_channel_mismatch_raises(self):
        x = Tensor(np.zeros((4, 4, 4)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        with pytest.raises(ShapeError, match="input channels"):
            conv2d(x, w)

    def test_spec_out_shape(self):
        spec = ConvSpec(3, 3, stride=2, padding=1)
        assert spec.out_shape(8, 8) == (4, 4)
        with pytest.raises(ShapeError):
            ConvSpec(3, 3, padding=-1)
        with pytest.raises(ShapeError):
            ConvSpec(5, 5).out_shape(3, 3)


class TestBatchNorm:
    def test_constant_input_zeroed(self):
        x = Tensor(np.full((2, 3, 3), 7.0))
        g = Tensor(np.ones(2))
        b = Tensor(np.zeros(2))
        out = batch_norm(x, g, b, mode="train")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_value_channel(self):
        x = t64(np.array([[[0.0, 2.0]]]))
        out = batch_norm(x, t64([1.0]), t64([0.0]), mode="train", eps=1e-12)
        np.testing.assert_allclose(out.data, [[[-1.0, 1.0]]], atol=1e-5)

    def test_eval_mode_direct_substitution(self):
        x = Tensor(np.ones((1, 1, 1)))
        out = batch_norm(x, Tensor([2.0]), Tensor([3.0]),
                         running_mean=np.zeros(1, np.float32),
                         running_var=np.ones(1, np.float32),
                         mode="eval", eps=1e-12)
        assert out.data.reshape(()) == pytest.approx(5.0, abs=1e-5)

    def test_train_normalizes(self):
        rng = np.random.default_rng(13)
        x = t64(rng.standard_normal((3, 8, 8)))
        out = batch_norm(x, t64(np.ones(3)), t64(np.zeros(3)), mode="train").data
        means = out.mean(axis=(1, 2))
        variances = out.var(axis=(1, 2))
        assert np.abs(means).max() < 1e-6
        assert np.abs(variances - 1.0).max() < 1e-4

    def test_running_stats_update(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.standard_normal((2, 4, 4)).astype(np.float32))
        rm = np.zeros(2, np.float32)
        rv = np.ones(2, np.float32)
        batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, mode="train")
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-5)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-5)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError, match="channels"):
            batch_norm(Tensor(np.zeros((3, 2, 2))), Tensor(np.ones(2)),
                       Tensor(np.zeros(2)), mode="train")

    def test_gradients_fd(self):
        rng = np.random.default_rng(15)
        x = t64(rng.standard_normal((2, 4, 4)))
        g = t64(rng.standard_normal(2) + 1.0)
        b = t64(rng.standard_normal(2))
        probe = rng.standard_normal((2, 4, 4))

        def mk(which):
            def f(t):
                args = {"x": (t, g, b), "g": (x, t, b), "b": (x, g, t)}[which]
                return (batch_norm(*args, mode="train") * Tensor(probe)).sum()
            return f

        for which in ("x", "g", "b"):
            assert finite_diff_check(mk(which), {"x": x, "g": g, "b": b}[which]) < 1e-6


class TestPixelShuffle:
    def test_r1_identity(self):
        x = Tensor(np.arange(8.0).reshape(2, 2, 2))
        assert pixel_shuffle(x, 1) is x

    def test_2x2_example(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
        out = pixel_shuffle(x, 2)
        np.testing.assert_array_equal(out.data, [[[1.0, 2.0], [3.0, 4.0]]])

    def test_exhaustive_index_oracle(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((8, 2, 2)).astype(np.float32)
        out = pixel_shuffle(Tensor(x), 2)
        np.testing.assert_array_equal(out.data, pixel_shuffle_naive(x, 2))

    def test_non_divisible_channels_raise(self):
        with pytest.raises(ShapeError, match="divisible"):
            pixel_shuffle(Tensor(np.zeros((6, 2, 2))), 2)

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_bijection_preserves_multiset(self, c, r, h, w):
        rng = np.random.default_rng(c * 100 + r * 10 + h)
        x = rng.standard_normal((c * r * r, h, w)).astype(np.float32)
        out = pixel_shuffle(Tensor(x), r).data
        assert out.shape == (c, r * h, r * w)
        np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(x.ravel()))

    def test_gradient_fd(self):
        rng = np.random.default_rng(17)
        x = t64(rng.standard_normal((4, 3, 2)))
        probe = rng.standard_normal((1, 6, 4))
        assert finite_diff_check(
            lambda t: (pixel_shuffle(t, 2) * Tensor(probe)).sum(), x) < 1e-8


class TestBilinearUpsample:
    def test_constant_preserved(self):
        x = Tensor(np.full((2, 3, 3), 5.0))
        for f in (1, 2, 4):
            np.testing.assert_allclose(bilinear_upsample(x, f).data, 5.0, atol=1e-6)

    def test_factor_1_identity(self):
        x = Tensor(np.arange(4.0).reshape(1, 2, 2))
        assert bilinear_upsample(x, 1) is x

    def test_half_pixel_1d_values(self):
        x = t64(np.array([[[0.0, 1.0]]]))
        out = bilinear_upsample(x, 2)
        np.testing.assert_allclose(out.data[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    def test_gradient_fd(self):
        rng = np.random.default_rng(18)
        x = t64(rng.standard_normal((2, 3, 4)))
        probe = rng.standard_normal((2, 6, 8))
        assert finite_diff_check(
            lambda t: (bilinear_upsample(t, 2) * Tensor(probe)).sum(), x) < 1e-8


class TestMaxPoolSame:
    def test_window_1_identity(self):
        x = Tensor(np.arange(9.0).reshape(1, 3, 3))
        np.testing.assert_array_equal(max_pool2d_same(x, 1).data, x.data)

    def test_spike_dilates_to_block(self):
        x = np.zeros((1, 5, 5), np.float32)
        x[0, 2, 2] = 1.0
        out = max_pool2d_same(Tensor(x), 3).data
        expected = np.zeros((1, 5, 5), np.float32)
        expected[0, 1:4, 1:4] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_all_equal_unchanged(self):
        x = Tensor(np.full((2, 4, 4), 3.5))
        np.testing.assert_array_equal(max_pool2d_same(x, 3).data, x.data)

    def test_even_window_raises(self):
        with pytest.raises(ShapeError, match="odd"):
            max_pool2d_same(Tensor(np.zeros((1, 3, 3))), 2)

    @pytest.mark.parametrize("window", [1, 3, 5, 7])
    def test_matches_naive_oracle(self, window):
        rng = np.random.default_rng(19 + window)
        x = rng.standard_normal((3, 6, 7)).astype(np.float64)
        out = max_pool2d_same(Tensor(x), window).data
        np.testing.assert_array_equal(out, max_pool_same_naive(x, window))

    def test_gradient_routes_to_argmax(self):
        x = t64(np.array([[[1.0, 2.0], [4.0, 3.0]]]), rg=True)
        with Tape() as tape:
            loss = max_pool2d_same(x, 3).sum()
        g = backward(loss, tape)[x]
        np.testing.assert_array_equal(g, [[[0.0, 0.0], [4.0, 0.0]]])


class TestReduce:
    def test_global_avg_constant(self):
        x = Tensor(np.full((3, 2, 2), 4.0))
        np.testing.assert_allclose(reduce(x, "global_avg").data.ravel(), [4.0] * 3)

    def test_channel_max(self):
        x = Tensor(np.array([1.0, 5.0, 3.0]).reshape(3, 1, 1))
        assert reduce(x, "channel_max").data.reshape(()) == 5.0

    def test_global_max_gradient_single_argmax(self):
        rng = np.random.default_rng(20)
        x = t64(rng.standard_normal((2, 3, 3)), rg=True)
        with Tape() as tape:
            loss = reduce(x, "global_max").sum()
        g = backward(loss, tape)[x]
        assert (g != 0).sum() == 2
        for c in range(2):
            assert g[c].ravel()[np.argmax(x.data[c])] == 1.0
        assert finite_diff_check(lambda t: reduce(t, "global_max").sum(), x) < 1e-7

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            reduce(Tensor(np.zeros((1, 2, 2))), "nope")


class TestLinearLayerNorm:
    def test_identity_weight(self):
        x = Tensor([[1.0, 2.0]])
        out = linear(x, Tensor(np.eye(2, dtype=np.float32)),
                     Tensor(np.array([1.0, 1.0])))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError, match="dim 3"):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_linear_fd(self):
        rng = np.random.default_rng(21)
        x = t64(rng.standard_normal((3, 4)))
        w = t64(rng.standard_normal((4, 5)))
        b = t64(rng.standard_normal(5))
        probe = rng.standard_normal((3, 5))
        assert finite_diff_check(
            lambda t: (linear(x, t, b) * Tensor(probe)).sum(), w) < 1e-7

    def test_layer_norm_normalizes_last_axis(self):
        rng = np.random.default_rng(22)
        x = t64(rng.standard_normal((5, 16)))
        out = layer_norm(x, t64(np.ones(16)), t64(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_layer_norm_fd(self):
        rng = np.random.default_rng(23)
        x = t64(rng.standard_normal((2, 6)))
        g = t64(rng.standard_normal(6) + 1.0)
        b = t64(rng.standard_normal(6))
        probe = rng.standard_normal((2, 6))
        assert finite_diff_check(
            lambda t: (layer_norm(t, g, b) * Tensor(probe)).sum(), x) < 1e-6


class TestComposedChain:
    def test_conv_bn_gelu_chain_fd(self):
        """Composed conv -> BN -> GELU checked against central differences."""
        rng = np.random.default_rng(24)
        x = t64(rng.standard_normal((3, 6, 6)))
        w = t64(rng.standard_normal((4, 3, 3, 3)) * 0.5)
        b = t64(rng.standard_normal(4) * 0.1)
        gam = t64(rng.standard_normal(4) * 0.3 + 1.0)
        bet = t64(rng.standard_normal(4) * 0.1)
        probe = rng.standard_normal((4, 6, 6)) / 10.0

        def chain(xx, ww, bb, gg, be):
            h = conv2d(xx, ww, bb, padding=1)
            h = batch_norm(h, gg, be, mode="train")
            return (gelu(h) * Tensor(probe)).sum()

        checks = [
            (x, lambda t: chain(t, w, b, gam, bet)),
            (w, lambda t: chain(x, t, b, gam, bet)),
            (b, lambda t: chain(x, w, t, gam, bet)),
            (gam, lambda t: chain(x, w, b, t, bet)),
            (bet, lambda t: chain(x, w, b, gam, t)),
        ]
        for target, f in checks:
            assert finite_diff_check(f, target, h=1e-5) < 1e-4
