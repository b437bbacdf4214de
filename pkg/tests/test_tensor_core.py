"""
Unit tests for the tensor core: primitive ops, the gradient tape and the
finite-difference checker.
"""
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.shared.domain.exceptions import ContractError, ParameterError, ShapeError
from src.shared.tensor import GradTape, Tensor, backward, finite_difference_check
from src.shared.tensor import functional as F

TOLERANCE = 1e-4


def _weighted_sum(out: Tensor, seed: int = 7) -> Tensor:
    """Scalar with a distinct weight per element so no gradient cancels."""
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
    return F.sum(out * Tensor(weights, dtype=np.float64))


def _f64(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def naive_conv2d(x, w, b, stride, padding, dilation, groups):
    """Loop oracle for grouped, dilated, strided cross-correlation."""
    n, c, h, wd = x.shape
    c_out, c_per_group, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = dilation * (k - 1) + 1
    h_out = (h + 2 * padding - span) // stride + 1
    w_out = (wd + 2 * padding - span) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    out_per_group = c_out // groups
    for i in range(n):
        for o in range(c_out):
            g = o // out_per_group
            for y in range(h_out):
                for xx in range(w_out):
                    total = 0.0
                    for ci in range(c_per_group):
                        for ky in range(k):
                            for kx in range(k):
                                total += (
                                    xp[i, g * c_per_group + ci, y * stride + ky * dilation, xx * stride + kx * dilation]
                                    * w[o, ci, ky, kx]
                                )
                    out[i, o, y, xx] = total + (b[o] if b is not None else 0.0)
    return out


class TestTensor:
    """Test Tensor construction."""

    def test_integer_data_becomes_float32(self):
        """Test non-float input is stored as float32."""
        t = Tensor(np.arange(6).reshape(2, 3))
        assert t.dtype == np.float32
        assert t.shape == (2, 3)

    def test_float64_is_kept(self):
        """Test float64 input keeps its precision."""
        assert Tensor(np.zeros(3), dtype=np.float64).dtype == np.float64

    def test_zero_extent_rejected(self):
        """Test a tensor with an empty axis is refused."""
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0, 3)))

    def test_item_needs_single_element(self):
        """Test item() on a vector raises."""
        with pytest.raises(ShapeError):
            Tensor(np.zeros(3)).item()


class TestElementwise:
    """Test arithmetic, broadcasting and activations."""

    def test_broadcast_gradient_is_summed(self):
        """Test gradients of a broadcast operand are reduced to its shape."""
        a = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.full((1, 3, 1, 1), 2.0), requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            loss = F.sum(a * b)
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, np.full(a.shape, 2.0))
        np.testing.assert_allclose(b.grad, np.full(b.shape, 32.0))

    def test_incompatible_shapes_rejected(self):
        """Test non-broadcastable operands raise a ShapeError naming both shapes."""
        with pytest.raises(ShapeError) as info:
            F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
        assert "(2, 3)" in str(info.value) and "(2, 4)" in str(info.value)

    def test_reused_tensor_accumulates(self):
        """Test x*x + x differentiates to 2x + 1."""
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            loss = F.sum(x * x + x)
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_hardswish_breakpoints(self):
        """Test hardswish at -3, 0 and 3."""
        out = F.hardswish(Tensor(np.array([-3.0, 0.0, 3.0]), dtype=np.float64)).numpy()
        np.testing.assert_allclose(out, [0.0, 0.0, 3.0])

    def test_hardsigmoid_midpoint(self):
        """Test hardsigmoid(0) = 0.5 and saturation at ±3."""
        out = F.hardsigmoid(Tensor(np.array([-4.0, 0.0, 4.0]), dtype=np.float64)).numpy()
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_clamp_inverted_bounds(self):
        """Test clamp refuses lo > hi."""
        with pytest.raises(ParameterError):
            F.clamp(Tensor(np.zeros(2)), 1.0, 0.0)

    @pytest.mark.parametrize("op", [F.sigmoid, F.tanh, F.exp])
    def test_smooth_activation_gradients(self, op, rng):
        """Test smooth activations against central differences."""
        x = _f64(rng, 2, 3, 4, 4)
        assert finite_difference_check(lambda t: _weighted_sum(op(t)), x, floor=1e-3) < TOLERANCE

    def test_bce_with_logits_matches_formula(self, rng):
        """Test stable BCE equals -y log p - (1-y) log(1-p)."""
        logits = rng.standard_normal(20)
        target = (rng.random(20) > 0.5).astype(np.float64)
        out = F.binary_cross_entropy_with_logits(Tensor(logits, dtype=np.float64), target).numpy()
        p = 1.0 / (1.0 + np.exp(-logits))
        expected = -(target * np.log(p) + (1 - target) * np.log(1 - p))
        np.testing.assert_allclose(out, expected, rtol=1e-10)

    def test_bce_gradient(self, rng):
        """Test BCE gradient w.r.t. logits."""
        target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        x = _f64(rng, 2, 1, 4, 4)
        f = lambda t: F.mean(F.binary_cross_entropy_with_logits(t, target))  # noqa: E731
        assert finite_difference_check(f, x, floor=1e-3) < TOLERANCE


class TestLayout:
    """Test reshape, slicing, concat, split and stack."""

    @settings(max_examples=25, deadline=None)
    @given(sizes=st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=4))
    def test_split_inverts_concat(self, sizes):
        """Test split(concat(parts)) returns the parts."""
        rng = np.random.default_rng(len(sizes))
        parts = [Tensor(rng.standard_normal((2, s, 3, 3))) for s in sizes]
        pieces = F.split(F.concat(parts, axis=1), sizes, axis=1)
        for original, piece in zip(parts, pieces):
            np.testing.assert_array_equal(original.numpy(), piece.numpy())

    def test_split_sizes_must_sum(self):
        """Test split with sizes not covering the axis raises."""
        with pytest.raises(ContractError):
            F.split(Tensor(np.zeros((1, 5, 2, 2))), [2, 2], axis=1)

    def test_concat_gradient_routes_to_parts(self, rng):
        """Test concat gradient slices back into each input."""
        a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            out = F.concat([a, b], axis=1)
            loss = F.sum(out * Tensor(np.arange(5, dtype=np.float64).reshape(1, 5, 1, 1)))
            tape.backward(loss)
        np.testing.assert_allclose(a.grad[0, :, 0, 0], [0.0, 1.0])
        np.testing.assert_allclose(b.grad[0, :, 0, 0], [2.0, 3.0, 4.0])

    def test_step_slice_gradient(self, rng):
        """Test strided slicing scatters gradients back to the sampled positions."""
        x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            tape.backward(F.sum(x[:, :, ::2, ::2]))
        expected = np.zeros((1, 1, 4, 4))
        expected[:, :, ::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_stack_then_reshape(self, rng):
        """Test stack inserts the new axis where requested."""
        parts = [Tensor(rng.standard_normal((2, 3))) for _ in range(4)]
        assert F.stack(parts, axis=1).shape == (2, 4, 3)
        assert F.reshape(F.stack(parts, axis=0), (8, 3)).shape == (8, 3)


class TestConvolution:
    """Test conv2d against a loop oracle and central differences."""

    @pytest.mark.parametrize("stride,padding,dilation,groups", [
        (1, 1, 1, 1),
        (2, 1, 1, 1),
        (1, 2, 2, 1),
        (1, 1, 1, 2),
        (2, 0, 1, 4),
    ])
    def test_matches_loop_oracle(self, stride, padding, dilation, groups, rng):
        """Test forward against the naive implementation."""
        x = rng.standard_normal((2, 4, 7, 6))
        w = rng.standard_normal((4, 4 // groups, 3, 3))
        b = rng.standard_normal(4)
        out = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                       stride, padding, dilation, groups).numpy()
        np.testing.assert_allclose(out, naive_conv2d(x, w, b, stride, padding, dilation, groups), atol=1e-10)

    def test_input_gradient(self, rng):
        """Test gradient with respect to the input."""
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
        x = _f64(rng, 1, 2, 6, 6)
        f = lambda t: _weighted_sum(F.conv2d(t, w, None, 2, 1, 1, 1))  # noqa: E731
        assert finite_difference_check(f, x, floor=1e-3) < TOLERANCE

    def test_weight_gradient_depthwise_dilated(self, rng):
        """Test weight gradient of a depthwise dilated convolution."""
        x = Tensor(rng.standard_normal((2, 3, 7, 7)), dtype=np.float64)
        w = _f64(rng, 3, 1, 3, 3)
        f = lambda t: _weighted_sum(F.conv2d(x, t, None, 1, 2, 2, 3))  # noqa: E731
        assert finite_difference_check(f, w, floor=1e-3) < TOLERANCE

    def test_bias_gradient(self, rng):
        """Test bias gradient equals the spatial sum of the upstream gradient."""
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 2, 1, 1)), dtype=np.float64)
        b = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            tape.backward(F.sum(F.conv2d(x, w, b)))
        np.testing.assert_allclose(b.grad, np.full(3, 16.0))

    def test_channel_mismatch_rejected(self, rng):
        """Test weight channels that do not match the input raise."""
        with pytest.raises((ShapeError, ContractError)):
            F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))), None, 1, 1)


class TestResampling:
    """Test pooling, bilinear resize, padding and box filtering."""

    def test_avg_pool_means(self):
        """Test 2x2 pooling of a 4x4 ramp."""
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        np.testing.assert_allclose(F.avg_pool_2x2(x).numpy()[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_avg_pool_odd_extent_gradient(self, rng):
        """Test pooling of odd extents (edge padded) against central differences."""
        x = _f64(rng, 1, 2, 5, 7)
        assert finite_difference_check(lambda t: _weighted_sum(F.avg_pool_2x2(t)), x, floor=1e-3) < TOLERANCE

    def test_bilinear_preserves_constants(self):
        """Test resizing a constant map keeps the constant."""
        x = Tensor(np.full((1, 2, 5, 7), 0.3), dtype=np.float64)
        np.testing.assert_allclose(F.bilinear_resize(x, 11, 3).numpy(), 0.3)

    def test_bilinear_gradient(self, rng):
        """Test resize gradient in both directions."""
        x = _f64(rng, 1, 1, 4, 6)
        assert finite_difference_check(lambda t: _weighted_sum(F.bilinear_resize(t, 9, 3)), x, floor=1e-3) < TOLERANCE

    def test_pad_reflect_and_edge(self):
        """Test reflect excludes the border sample while edge repeats it."""
        x = Tensor(np.array([0.0, 1.0, 2.0]).reshape(1, 1, 1, 3), dtype=np.float64)
        np.testing.assert_allclose(F.pad2d(x, 1, "edge").numpy()[0, 0, 1], [0.0, 0.0, 1.0, 2.0, 2.0])
        wide = Tensor(np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3))
        padded = F.pad2d(wide, 1, "reflect").numpy()[0, 0]
        np.testing.assert_allclose(padded[2], [4.0, 3.0, 4.0, 5.0, 4.0])
        np.testing.assert_allclose(padded[0], [4.0, 3.0, 4.0, 5.0, 4.0])

    def test_box_filter_constant_and_border(self):
        """Test the window mean divides by the in-bounds pixel count."""
        x = Tensor(np.full((1, 1, 5, 5), 2.0), dtype=np.float64)
        np.testing.assert_allclose(F.box_filter(x, 2).numpy(), 2.0)
        ramp = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
        corner = F.box_filter(ramp, 1).numpy()[0, 0, 0, 0]
        assert corner == pytest.approx(np.mean([0, 1, 5, 6]))

    def test_box_filter_gradient(self, rng):
        """Test box filter gradient."""
        x = _f64(rng, 1, 2, 6, 5)
        assert finite_difference_check(lambda t: _weighted_sum(F.box_filter(t, 1)), x, floor=1e-3) < TOLERANCE


class TestBatchNorm:
    """Test batch normalization in both modes."""

    def _params(self, channels):
        gamma = Tensor(np.ones(channels), dtype=np.float64)
        beta = Tensor(np.zeros(channels), dtype=np.float64)
        return gamma, beta, np.zeros(channels), np.ones(channels)

    def test_training_mode_normalizes(self, rng):
        """Test per-channel zero mean and unit variance in training mode."""
        gamma, beta, mean, var = self._params(3)
        x = Tensor(rng.normal(5.0, 2.0, size=(4, 3, 6, 6)), dtype=np.float64)
        out = F.batch_norm(x, gamma, beta, mean, var, training=True).numpy()
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_statistics_update(self, rng):
        """Test momentum 1.0 copies batch statistics into the buffers."""
        gamma, beta, mean, var = self._params(2)
        data = rng.normal(1.0, 3.0, size=(2, 2, 4, 4))
        F.batch_norm(Tensor(data, dtype=np.float64), gamma, beta, mean, var, training=True, momentum=1.0)
        np.testing.assert_allclose(mean, data.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(var, data.var(axis=(0, 2, 3)))

    def test_inference_reproduces_training_with_full_momentum(self, rng):
        """Test inference with buffers from a momentum-1 pass equals the training output."""
        gamma, beta, mean, var = self._params(2)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), dtype=np.float64)
        train_out = F.batch_norm(x, gamma, beta, mean, var, training=True, momentum=1.0).numpy()
        infer_out = F.batch_norm(x, gamma, beta, mean, var, training=False).numpy()
        np.testing.assert_allclose(train_out, infer_out, atol=1e-10)

    def test_training_gradient(self, rng):
        """Test the training-mode input gradient."""
        gamma = Tensor(rng.uniform(0.5, 1.5, 3), dtype=np.float64)
        beta = Tensor(rng.standard_normal(3), dtype=np.float64)
        x = _f64(rng, 2, 3, 3, 3)

        def f(t):
            return _weighted_sum(F.batch_norm(t, gamma, beta, np.zeros(3), np.ones(3), training=True))

        assert finite_difference_check(f, x, floor=1e-3) < TOLERANCE

    def test_invalid_eps(self):
        """Test non-positive eps is refused."""
        gamma, beta, mean, var = self._params(1)
        with pytest.raises(ParameterError):
            F.batch_norm(Tensor(np.zeros((1, 1, 2, 2))), gamma, beta, mean, var, training=False, eps=0.0)


class TestTape:
    """Test tape bookkeeping and the checker's preconditions."""

    def test_backward_needs_scalar(self):
        """Test backward from a non-scalar raises."""
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            y = x * 2.0
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_no_tape_no_recording(self):
        """Test ops outside a tape produce tensors without gradient tracking."""
        x = Tensor(np.ones(3), requires_grad=True)
        assert not (x * 2.0).requires_grad

    def test_checker_needs_float64(self):
        """Test the finite-difference checker refuses float32."""
        with pytest.raises(ContractError):
            finite_difference_check(lambda t: F.sum(t), Tensor(np.ones(3)))

    def test_checker_flags_wrong_gradient(self):
        """Test a deliberately wrong backward is caught."""
        from src.shared.tensor.functional import _emit

        def bad_square(t):
            return _emit("bad_square", t.data ** 2, (t,), lambda g: (g * t.data,))

        x = Tensor(np.array([1.0, 2.0, 3.0]), dtype=np.float64)
        assert finite_difference_check(lambda t: F.sum(bad_square(t)), x) > 0.4
