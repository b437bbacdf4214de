"""
Unit tests for the recurrent matting network: shapes, contracts, recurrence
semantics and parameter/MAC accounting.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.services.matting_service.domain.entities import BackboneType, ModelConfig, RecurrentState
from src.services.matting_service.infrastructure.decoder import ConvGRU, conv_gru_cell
from src.services.matting_service.infrastructure.inference import MattingInference, infer_clip, pad_to_multiple
from src.services.matting_service.infrastructure.network import (
    build_model,
    count_macs,
    count_pooled_macs,
    count_params,
    forward,
    internal_resolution,
    parameter_breakdown,
)
from src.shared.domain.exceptions import (
    ConfigError,
    ContractError,
    ResolutionError,
    ShapeError,
    StateResetError,
)
from src.shared.tensor import GradTape, Tensor, finite_difference_check
from src.shared.tensor import functional as F

TINY_PARAMS = 11_877
DEFAULT_PARAMS = 3_749_000


def _frames(rng, batch=1, time=3, height=64, width=64):
    return Tensor(rng.random((batch, time, 3, height, width), dtype=np.float32))


class TestModelConfig:
    """Test ModelConfig validation and presets."""

    def test_tiny_preset(self):
        """Test the tiny preset widths."""
        config = ModelConfig.tiny_test()
        assert config.backbone == BackboneType.TINY_TEST
        assert config.recurrent_channels == (4, 4, 4, 4)
        assert config.hidden_channels == 4

    def test_odd_recurrent_width_rejected(self):
        """Test decoder widths at recurrent scales must be even."""
        with pytest.raises((ConfigError, ValueError)):
            ModelConfig(backbone="tiny_test", encoder_channels=(4, 6, 8, 16), aspp_channels=8,
                        decoder_channels=(8, 7, 8, 8, 4))

    def test_parse_preset_with_override(self):
        """Test a preset name plus field overrides."""
        config = ModelConfig.parse({"preset": "tiny_test", "dgf_channels": 8})
        assert config.dgf_channels == 8
        assert config.encoder_channels == (4, 6, 8, 16)

    def test_unknown_preset(self):
        """Test an unknown preset raises ConfigError."""
        with pytest.raises(ConfigError):
            ModelConfig.parse({"preset": "enormous"})

    def test_large_variant_has_no_encoder(self):
        """Test the large channel table is describable but not buildable."""
        config = ModelConfig.resnet50_large()
        assert config.encoder_channels == (64, 256, 512, 2048)
        with pytest.raises(ConfigError):
            build_model(config)


class TestBuild:
    """Test deterministic construction and parameter accounting."""

    def test_same_seed_same_parameters(self, tiny_config):
        """Test two builds with one seed are identical."""
        a = build_model(tiny_config, seed=11).state_dict()
        b = build_model(tiny_config, seed=11).state_dict()
        assert list(a) == list(b)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seed_differs(self, tiny_config):
        """Test different seeds draw different weights."""
        a = build_model(tiny_config, seed=1).state_dict()
        b = build_model(tiny_config, seed=2).state_dict()
        assert any(not np.array_equal(a[name], b[name]) for name in a)

    def test_gru_biases_start_at_zero(self, tiny_model):
        """Test every ConvGRU bias is zero-initialized."""
        for name, param in tiny_model.named_parameters():
            if ".gru." in name and name.endswith(".bias"):
                assert not param.data.any(), name

    def test_tiny_parameter_count(self, tiny_model):
        """Test the tiny network's exact parameter count."""
        assert count_params(tiny_model) == TINY_PARAMS

    def test_breakdown_sums_to_total(self, tiny_model):
        """Test per-block counts add up and cover every block."""
        breakdown = parameter_breakdown(tiny_model)
        assert sum(breakdown.values()) == tiny_model.num_parameters()
        assert list(breakdown)[0] == "backbone"
        assert "refiner" in breakdown

    @pytest.mark.slow
    def test_default_parameter_count(self):
        """Test the default MobileNetV3 network lands near 3.749M parameters."""
        model = build_model(ModelConfig.default(), seed=0)
        assert abs(count_params(model) - DEFAULT_PARAMS) / DEFAULT_PARAMS < 0.05


class TestForward:
    """Test forward-pass shapes and contracts."""

    def test_output_shapes(self, tiny_model, rng):
        """Test B×T×C×H×W outputs and state extents."""
        output, state = tiny_model.forward(_frames(rng, batch=2, time=3))
        assert output.alpha.shape == (2, 3, 1, 64, 64)
        assert output.foreground.shape == (2, 3, 3, 64, 64)
        assert output.segmentation_logits.shape == (2, 3, 1, 64, 64)
        assert output.final_hidden.shape == (2, 3, 4, 64, 64)
        assert [tuple(h.shape) for h in state.hidden] == state.expected_shapes(tiny_model.config, 2, 64, 64)

    def test_outputs_are_clamped(self, tiny_model, rng):
        """Test alpha and foreground stay within [0, 1]."""
        output, _ = tiny_model.forward(_frames(rng))
        for plane in (output.alpha.numpy(), output.foreground.numpy()):
            assert plane.min() >= 0.0 and plane.max() <= 1.0

    def test_downsampled_output_is_full_resolution(self, tiny_model, rng):
        """Test s < 1 without refinement still returns input-sized maps."""
        output, state = tiny_model.forward(_frames(rng, height=128, width=64), downsample=0.5)
        assert output.alpha.shape == (1, 3, 1, 128, 64)
        assert state.hidden[3].shape[2:] == (32, 16)

    def test_dgf_output_is_full_resolution(self, tiny_model, rng):
        """Test the refinement head returns input-sized alpha and foreground."""
        output, _ = tiny_model.forward(_frames(rng, time=2, height=128, width=128), downsample=0.25, use_dgf=True)
        assert output.alpha.shape == (1, 2, 1, 128, 128)
        assert output.foreground.shape == (1, 2, 3, 128, 128)

    def test_dgf_without_downsampling_rejected(self, tiny_model, rng):
        """Test refinement at s = 1 is refused."""
        with pytest.raises(ContractError):
            tiny_model.forward(_frames(rng), downsample=1.0, use_dgf=True)

    def test_tiny_internal_resolution_rejected(self, tiny_model, rng):
        """Test a factor that leaves less than 16 pixels raises ResolutionError."""
        with pytest.raises(ResolutionError):
            tiny_model.forward(_frames(rng), downsample=0.1)

    def test_indivisible_extent_rejected(self, tiny_model, rng):
        """Test full-resolution extents must be multiples of 16."""
        with pytest.raises(ShapeError):
            tiny_model.forward(_frames(rng, height=40, width=64))

    def test_internal_resolution_rounds_to_16(self):
        """Test the internal size rounds s·H to the nearest multiple of 16."""
        assert internal_resolution(1080, 1920, 0.25) == (272, 480)
        assert internal_resolution(64, 64, 0.5) == (32, 32)

    def test_state_from_other_resolution_rejected(self, tiny_model, rng):
        """Test feeding a state built for other extents raises StateResetError."""
        _, state = tiny_model.forward(_frames(rng, time=1))
        with pytest.raises(StateResetError):
            tiny_model.forward(_frames(rng, time=1, height=32, width=32), state)

    def test_functional_forward_matches_method(self, tiny_model, rng):
        """Test the module-level forward passes s and use_dgf through."""
        tiny_model.eval()
        frames = _frames(rng, time=2)
        a, _ = forward(tiny_model, frames, s=0.5)
        b, _ = tiny_model.forward(frames, downsample=0.5)
        np.testing.assert_array_equal(a.alpha.numpy(), b.alpha.numpy())


class TestRecurrence:
    """Test recurrent-state semantics."""

    def test_streaming_matches_batch(self, tiny_model, rng):
        """Test frame-by-frame streaming equals one T-frame call in inference mode."""
        tiny_model.eval()
        frames = _frames(rng, time=4)
        batch_out, batch_state = tiny_model.forward(frames)
        state = None
        alphas = []
        for t in range(4):
            out, state = tiny_model.forward(frames[:, t:t + 1], state)
            alphas.append(out.alpha.numpy())
        np.testing.assert_allclose(np.concatenate(alphas, axis=1), batch_out.alpha.numpy(), atol=1e-5)
        for a, b in zip(state.hidden, batch_state.hidden):
            np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-5)

    def test_zero_state_makes_frames_independent(self, tiny_model, rng):
        """Test that without recurrence a frame's output ignores earlier frames."""
        tiny_model.eval()
        first = rng.random((1, 1, 3, 64, 64), dtype=np.float32)
        other = rng.random((1, 1, 3, 64, 64), dtype=np.float32)
        last = rng.random((1, 1, 3, 64, 64), dtype=np.float32)
        clip_a = Tensor(np.concatenate([first, last], axis=1))
        clip_b = Tensor(np.concatenate([other, last], axis=1))

        a, _ = tiny_model.forward(clip_a, recurrence=False)
        b, _ = tiny_model.forward(clip_b, recurrence=False)
        np.testing.assert_allclose(a.alpha.numpy()[:, 1], b.alpha.numpy()[:, 1], atol=1e-6)

        a, _ = tiny_model.forward(clip_a)
        b, _ = tiny_model.forward(clip_b)
        hidden_a = a.final_hidden.numpy()[:, 1]
        hidden_b = b.final_hidden.numpy()[:, 1]
        assert not np.array_equal(hidden_a, hidden_b)

    def test_intermediates_snapshot_every_step(self, tiny_model, rng):
        """Test return_intermediates exposes one state per time step."""
        output, state = tiny_model.forward(_frames(rng, time=3), return_intermediates=True)
        assert len(output.state_history) == 3
        for a, b in zip(output.state_history[-1].hidden, state.hidden):
            np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_fresh_state_equals_explicit_zeros(self, tiny_model, rng):
        """Test omitting the state is the same as passing zero maps."""
        tiny_model.eval()
        frames = _frames(rng, time=2)
        a, _ = tiny_model.forward(frames)
        zeros = RecurrentState.zeros(tiny_model.config, 1, 64, 64)
        b, _ = tiny_model.forward(frames, zeros)
        np.testing.assert_allclose(a.alpha.numpy(), b.alpha.numpy(), atol=1e-7)


class TestConvGRU:
    """Test the ConvGRU cell."""

    def _cell(self, gate_bias: float) -> ConvGRU:
        cell = ConvGRU(2, np.random.default_rng(0)).astype(np.float64)
        cell.gates.weight.data[...] = 0.0
        cell.gates.bias.data[...] = gate_bias
        return cell

    def test_closed_update_gate_keeps_state(self, rng):
        """Test z → 1 returns the previous state."""
        cell = self._cell(40.0)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        h = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        np.testing.assert_allclose(conv_gru_cell(x, h, cell).numpy(), h.numpy(), atol=1e-12)

    def test_open_update_gate_takes_candidate(self, rng):
        """Test z → 0 returns tanh of the candidate convolution with r ≈ 0."""
        cell = self._cell(-40.0)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        h = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        zeros = Tensor(np.zeros((1, 2, 4, 4)), dtype=np.float64)
        expected = F.tanh(cell.candidate(F.concat([x, zeros], axis=1))).numpy()
        np.testing.assert_allclose(conv_gru_cell(x, h, cell).numpy(), expected, atol=1e-12)

    def test_state_gradient(self, rng):
        """Test the cell's gradient with respect to the previous state."""
        cell = ConvGRU(2, np.random.default_rng(3)).astype(np.float64)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        h = Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
        weights = Tensor(rng.uniform(0.5, 1.5, (1, 2, 4, 4)), dtype=np.float64)
        error = finite_difference_check(lambda t: F.sum(conv_gru_cell(x, t, cell) * weights), h, floor=1e-3)
        assert error < 1e-4

    def test_mismatched_state_rejected(self, rng):
        """Test input and state extents must agree."""
        cell = ConvGRU(2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            conv_gru_cell(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))), cell)


class TestGradientFlow:
    """Test end-to-end differentiation through the network."""

    def test_every_parameter_receives_gradient_with_dgf(self, tiny_model, rng):
        """Test a refined forward pass reaches every trainable parameter."""
        frames = _frames(rng, time=2, height=128, width=128)
        with GradTape() as tape:
            output, _ = tiny_model.forward(frames, downsample=0.5, use_dgf=True)
            loss = F.mean(output.alpha) + F.mean(output.foreground) + F.mean(output.segmentation_logits)
            tape.backward(loss)
        missing = [name for name, p in tiny_model.named_parameters() if p.grad is None]
        assert missing == []


class TestMacs:
    """Test multiply-accumulate counting."""

    def test_downsampling_reduces_work(self, tiny_model):
        """Test s = 0.25 costs fewer MACs than s = 1 at the same output size."""
        assert count_macs(tiny_model, 128, 128, 0.25) < count_macs(tiny_model, 128, 128, 1.0)

    def test_macs_scale_with_area(self, tiny_model):
        """Test four times the pixels costs roughly four times the MACs."""
        small = count_macs(tiny_model, 64, 64)
        large = count_macs(tiny_model, 128, 128)
        assert 3.5 < large / small <= 4.0 + 1e-9

    def test_pooled_convolutions_counted_apart(self, tiny_model):
        """Test the LR-ASPP gate over the pooled vector is reported separately and does not scale with area."""
        # tiny encoder emits 16 channels at 1/16, LR-ASPP projects to 8
        assert count_pooled_macs(tiny_model, 64, 64) == 16 * 8
        assert count_pooled_macs(tiny_model, 128, 128) == 16 * 8

    def test_counting_leaves_mode_untouched(self, tiny_model):
        """Test the counter restores training mode."""
        tiny_model.train()
        count_macs(tiny_model, 64, 64)
        assert tiny_model.training


class TestInference:
    """Test the clip inference helper."""

    def test_padding_to_multiple(self):
        """Test edge padding to a multiple of 16 and its size report."""
        frames = np.zeros((2, 3, 50, 64), dtype=np.float32)
        padded, padding = pad_to_multiple(frames)
        assert padded.shape == (2, 3, 64, 64)
        assert padding == (14, 0)

    def test_streaming_and_batch_agree(self, tiny_model, matting_clip):
        """Test the two inference modes give the same mattes."""
        a, fa = infer_clip(tiny_model, matting_clip.frames[:4], streaming=True)
        b, fb = infer_clip(tiny_model, matting_clip.frames[:4], streaming=False)
        np.testing.assert_allclose(a, b, atol=1e-5)
        np.testing.assert_allclose(fa, fb, atol=1e-5)

    def test_unpadded_output_size(self, tiny_model, rng):
        """Test outputs are cropped back to the input extents."""
        frames = rng.random((2, 3, 40, 56), dtype=np.float32)
        alpha, fg = infer_clip(tiny_model, frames)
        assert alpha.shape == (2, 1, 40, 56)
        assert fg.shape == (2, 3, 40, 56)

    def test_dgf_needs_downsampling(self, tiny_model):
        """Test the runner refuses refinement at s = 1."""
        with pytest.raises(ContractError):
            MattingInference(tiny_model, downsample=1.0, use_dgf=True)
