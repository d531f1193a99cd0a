"""Primitive tensor operations against hand-derived and brute-force oracles."""

import numpy as np
import pytest

from cfpnet.tensor import (
    ConvSpec,
    GradTape,
    ShapeError,
    Tensor,
    avgpool,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    channel_slice,
    conv2d,
    maxpool2x2,
    prelu,
    spatial_pick,
    tensor_sum,
)


def brute_force_conv(x, w, spec):
    """Nested-loop dilated strided cross-correlation, the slow reference."""
    n, cin, h, width = x.shape
    oh, ow = spec.output_hw(h, width)
    xp = np.pad(x, ((0, 0), (0, 0),
                    (spec.padding_h, spec.padding_h),
                    (spec.padding_w, spec.padding_w)))
    out = np.zeros((n, spec.out_channels, oh, ow))
    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for ki in range(spec.kernel_h):
                            for kj in range(spec.kernel_w):
                                acc += (xp[b, c,
                                           i * spec.stride + ki * spec.dilation,
                                           j * spec.stride + kj * spec.dilation]
                                        * w[o, c, ki, kj])
                    out[b, o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_permutation_1x1(self):
        x = Tensor(np.arange(2 * 2 * 3 * 3, dtype=np.float32).reshape(2, 2, 3, 3))
        w = Tensor(np.array([[[[0.0]], [[1.0]]],
                             [[[1.0]], [[0.0]]]], np.float32))
        y = conv2d(x, w, None, ConvSpec(1, 1, 2, 2))
        np.testing.assert_array_equal(y.data, x.data[:, ::-1])

    def test_ones_kernel_constant_input_interior_is_nine(self):
        x = Tensor(np.ones((1, 1, 5, 5), np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        y = conv2d(x, w, None, ConvSpec.same(3, 3, 1, 1))
        assert y.shape == (1, 1, 5, 5)
        np.testing.assert_array_equal(y.data[0, 0, 1:-1, 1:-1], 9.0)

    def test_dilation2_gradient_footprint_is_5x5(self):
        x = Tensor(np.zeros((1, 1, 9, 9), np.float64))
        w = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3)))
        tape = GradTape()
        y = conv2d(x, w, None, ConvSpec.same(3, 3, 1, 1, dilation=2), tape)
        tape.backward(spatial_pick(y, 0, 0, 4, 4, tape))
        rows, cols = np.nonzero(x.grad[0, 0])
        assert rows.min() == 2 and rows.max() == 6
        assert cols.min() == 2 and cols.max() == 6
        assert len(rows) == 9  # 3x3 taps spaced by 2 within the 5x5 box

    def test_asymmetric_dilated_pair_matches_brute_force(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 4, 9, 9)).astype(np.float32))
        spec_v = ConvSpec.same(3, 1, 4, 3, dilation=2)
        spec_h = ConvSpec.same(1, 3, 3, 3, dilation=2)
        wv = Tensor(rng.standard_normal((3, 4, 3, 1)).astype(np.float32))
        wh = Tensor(rng.standard_normal((3, 3, 1, 3)).astype(np.float32))
        got = conv2d(conv2d(x, wv, None, spec_v), wh, None, spec_h)
        mid = brute_force_conv(x.data.astype(np.float64), wv.data, spec_v)
        want = brute_force_conv(mid, wh.data, spec_h)
        np.testing.assert_allclose(got.data, want, rtol=1e-5, atol=1e-5)

    def test_strided_conv_matches_brute_force(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        spec = ConvSpec(3, 3, 3, 5, stride=2, padding_h=1, padding_w=1)
        w = Tensor(rng.standard_normal((5, 3, 3, 3)).astype(np.float32))
        got = conv2d(x, w, None, spec)
        want = brute_force_conv(x.data.astype(np.float64), w.data, spec)
        assert got.shape == (2, 5, 4, 4)
        np.testing.assert_allclose(got.data, want, rtol=1e-5, atol=1e-5)

    def test_bias_added_per_output_channel(self):
        x = Tensor(np.zeros((1, 2, 3, 3), np.float32))
        w = Tensor(np.zeros((2, 2, 1, 1), np.float32))
        b = Tensor(np.array([1.5, -2.0], np.float32))
        y = conv2d(x, w, b, ConvSpec(1, 1, 2, 2, has_bias=True))
        np.testing.assert_array_equal(y.data[0, 0], 1.5)
        np.testing.assert_array_equal(y.data[0, 1], -2.0)

    def test_linearity_of_bias_free_conv(self):
        rng = np.random.default_rng(5)
        spec = ConvSpec.same(3, 3, 2, 3)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        y = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        lhs = conv2d(Tensor(2.0 * x + 3.0 * y), w, None, spec).data
        rhs = (2.0 * conv2d(Tensor(x), w, None, spec).data
               + 3.0 * conv2d(Tensor(y), w, None, spec).data)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)

    def test_shape_mismatches_rejected(self):
        spec = ConvSpec(3, 3, 2, 4)
        x = Tensor(np.zeros((1, 3, 6, 6), np.float32))
        w = Tensor(np.zeros((4, 2, 3, 3), np.float32))
        with pytest.raises(ShapeError):
            conv2d(x, w, None, spec)
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 6, 6), np.float32)),
                   Tensor(np.zeros((4, 2, 5, 5), np.float32)), None, spec)

    def test_same_padding_preserves_extents_for_network_shapes(self):
        for kh, kw, dil in ((3, 3, 1), (3, 1, 2), (1, 3, 16), (1, 1, 1)):
            spec = ConvSpec.same(kh, kw, 2, 2, dilation=dil)
            x = Tensor(np.zeros((1, 2, 40, 40), np.float32))
            w = Tensor(np.zeros((2, 2, kh, kw), np.float32))
            assert conv2d(x, w, None, spec).shape == (1, 2, 40, 40)

    def test_forward_is_deterministic_bitwise(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        spec = ConvSpec.same(3, 3, 3, 4)
        first = conv2d(x, w, None, spec).data
        second = conv2d(x, w, None, spec).data
        assert np.array_equal(first, second)


class TestPooling:
    def test_maxpool_2x2_single_window(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32))
        np.testing.assert_array_equal(maxpool2x2(x).data, [[[[4.0]]]])

    def test_maxpool_constant_input(self):
        x = Tensor(np.full((1, 2, 4, 4), 7.0, np.float32))
        np.testing.assert_array_equal(maxpool2x2(x).data, 7.0)

    def test_maxpool_ramp_enumeration(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(
            maxpool2x2(x).data[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_maxpool_rejects_tiny_input(self):
        with pytest.raises(ShapeError):
            maxpool2x2(Tensor(np.zeros((1, 1, 1, 4), np.float32)))

    def test_avgpool_factor1_identity(self):
        x = Tensor(np.random.default_rng(7).standard_normal((1, 2, 4, 4)))
        np.testing.assert_array_equal(avgpool(x, 1).data, x.data)

    def test_avgpool_constant(self):
        x = Tensor(np.full((1, 1, 8, 8), 3.0, np.float32))
        np.testing.assert_array_equal(avgpool(x, 4).data, 3.0)

    def test_avgpool_block_mean(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32))
        np.testing.assert_array_equal(avgpool(x, 2).data, [[[[2.5]]]])

    def test_avgpool_rejects_non_divisible(self):
        with pytest.raises(ShapeError):
            avgpool(Tensor(np.zeros((1, 1, 6, 6), np.float32)), 4)


class TestBilinearUpsample:
    def test_constant_stays_constant(self):
        x = Tensor(np.full((1, 3, 3, 5), 2.5, np.float32))
        y = bilinear_upsample(x, 4)
        assert y.shape == (1, 3, 12, 20)
        np.testing.assert_allclose(y.data, 2.5, rtol=1e-6)

    def test_single_pixel_factor8(self):
        x = Tensor(np.array([[[[1.25]]]], np.float32))
        y = bilinear_upsample(x, 8)
        assert y.shape == (1, 1, 8, 8)
        np.testing.assert_array_equal(y.data, 1.25)

    def test_two_pixel_row_against_scalar_oracle(self):
        # independent scalar evaluation of align-corners-false interpolation
        def oracle(values, factor):
            n = len(values)
            out = []
            for i in range(n * factor):
                src = (i + 0.5) / factor - 0.5
                lo = int(np.floor(src))
                frac = src - lo
                lo_c = min(max(lo, 0), n - 1)
                hi_c = min(max(lo + 1, 0), n - 1)
                out.append(values[lo_c] * (1 - frac) + values[hi_c] * frac)
            return out

        x = Tensor(np.array([[[[0.0, 8.0]]]], np.float64))
        y = bilinear_upsample(x, 2)
        want = oracle([0.0, 8.0], 2)
        for row in range(2):
            np.testing.assert_allclose(y.data[0, 0, row], want, atol=1e-12)


class TestPReLU:
    def test_positive_passthrough(self):
        x = Tensor(np.full((1, 2, 1, 1), 3.0, np.float32))
        alpha = Tensor(np.array([0.9, 0.1], np.float32))
        np.testing.assert_array_equal(prelu(x, alpha).data, 3.0)

    def test_negative_scaled(self):
        x = Tensor(np.full((1, 1, 1, 1), -2.0, np.float32))
        alpha = Tensor(np.array([0.25], np.float32))
        np.testing.assert_array_equal(prelu(x, alpha).data, -0.5)

    def test_alpha_gradient_closed_form(self):
        x = Tensor(np.full((1, 1, 1, 1), -2.0, np.float64))
        alpha = Tensor(np.array([0.25], np.float64))
        tape = GradTape()
        loss = tensor_sum(prelu(x, alpha, tape), tape)
        tape.backward(loss)
        np.testing.assert_allclose(alpha.grad, [-2.0], rtol=1e-12)

    def test_alpha_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            prelu(Tensor(np.zeros((1, 3, 2, 2), np.float32)),
                  Tensor(np.zeros(2, np.float32)))


class TestBatchNorm:
    def test_infer_identity_stats(self):
        rng = np.random.default_rng(8)
        data = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        x = Tensor(data)
        y = batch_norm(x, Tensor(np.ones(2, np.float32)),
                       Tensor(np.zeros(2, np.float32)),
                       np.zeros(2, np.float32), np.ones(2, np.float32))
        np.testing.assert_allclose(y.data, data / np.sqrt(1 + 1e-5), rtol=1e-6)

    def test_infer_beta_shift(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        y = batch_norm(x, Tensor(np.ones(1, np.float32)),
                       Tensor(np.full(1, 5.0, np.float32)),
                       np.zeros(1, np.float32), np.ones(1, np.float32))
        np.testing.assert_allclose(y.data, 5.0, atol=1e-6)

    def test_train_mode_matches_scalar_statistics_oracle(self):
        # one channel with values whose mean is 2 and biased variance is 4
        values = np.array([0.0, 0.0, 4.0, 4.0])
        x = Tensor(values.reshape(1, 1, 2, 2))
        rm, rv = np.zeros(1), np.ones(1)
        y = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                       rm, rv, mode="train")
        want = (values - 2.0) / np.sqrt(4.0 + 1e-5)
        np.testing.assert_allclose(y.data.ravel(), want, rtol=1e-5)
        # running stats moved one EMA step toward the batch statistics
        np.testing.assert_allclose(rm, [0.2], rtol=1e-6)
        np.testing.assert_allclose(rv, [0.9 + 0.1 * 4.0], rtol=1e-6)

    def test_train_mode_rejects_empty_batch(self):
        x = Tensor(np.zeros((0, 1, 2, 2), np.float32))
        with pytest.raises(ShapeError):
            batch_norm(x, Tensor(np.ones(1, np.float32)),
                       Tensor(np.zeros(1, np.float32)),
                       np.zeros(1, np.float32), np.ones(1, np.float32),
                       mode="train")


class TestConcatAndSlice:
    def test_single_input_identity(self):
        x = Tensor(np.random.default_rng(9).standard_normal((1, 3, 2, 2)))
        np.testing.assert_array_equal(concat_channels([x]).data, x.data)

    def test_two_inputs_ordered(self):
        a = Tensor(np.zeros((1, 2, 2, 2), np.float32))
        b = Tensor(np.ones((1, 2, 2, 2), np.float32))
        y = concat_channels([a, b])
        assert y.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(y.data[:, :2], 0.0)
        np.testing.assert_array_equal(y.data[:, 2:], 1.0)

    def test_concat_slice_round_trip(self):
        rng = np.random.default_rng(10)
        parts = [Tensor(rng.standard_normal((2, c, 3, 3)).astype(np.float32))
                 for c in (1, 2, 3)]
        y = concat_channels(parts)
        start = 0
        for part in parts:
            width = part.shape[1]
            np.testing.assert_array_equal(
                channel_slice(y, start, start + width).data, part.data)
            start += width

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.zeros((1, 1, 2, 2), np.float32)),
                             Tensor(np.zeros((1, 1, 3, 3), np.float32))])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(11).standard_normal((1, 2, 3, 3)))
        tape = GradTape()
        tape.backward(tensor_sum(x, tape))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_1x1_conv_weight_gradient_closed_form(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(rng.standard_normal((5, 3, 1, 1)))
        tape = GradTape()
        y = conv2d(x, w, None, ConvSpec(1, 1, 3, 5), tape)
        tape.backward(tensor_sum(y, tape))
        want = np.tile(x.data.sum(axis=(0, 2, 3))[None, :, None, None], (5, 1, 1, 1))
        np.testing.assert_allclose(w.grad, want, rtol=1e-10)

    def test_non_scalar_seed_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        with pytest.raises(ShapeError):
            GradTape().backward(x)

    def test_unreferenced_parameters_get_zero_gradient(self):
        x = Tensor(np.ones((1, 1, 2, 2), np.float32))
        orphan = Tensor(np.ones(3, np.float32))
        tape = GradTape()
        loss = tensor_sum(x, tape)
        tape.backward(loss, parameters=[orphan])
        np.testing.assert_array_equal(orphan.grad, np.zeros(3, np.float32))

    def test_gradients_accumulate_over_shared_input(self):
        x = Tensor(np.ones((1, 1, 2, 2), np.float64))
        tape = GradTape()
        total = tensor_sum(concat_channels([x, x], tape), tape)
        tape.backward(total)
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))


class TestSpatialPick:
    def test_picks_single_value(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
        assert spatial_pick(x, 0, 1, 1, 0).data == 6.0

    def test_out_of_range_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        with pytest.raises(IndexError):
            spatial_pick(x, 0, 0, 2, 0)
