"""
Tests for the matting and segmentation training losses.
"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.services.ml_service.domain.entities import LossReport
from src.services.ml_service.infrastructure.losses import (
    foreground_losses,
    l1_alpha,
    laplacian_pyramid,
    laplacian_pyramid_loss,
    loss_report,
    matting_loss,
    segmentation_bce,
    temporal_coherence_alpha,
    total_matting_loss,
)
from src.shared.domain.exceptions import ContractError, ShapeError
from src.shared.tensor import Tensor, finite_difference_check


def _tensor(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), dtype=np.float64)


class TestAlphaL1:
    """Test the L1 alpha loss."""

    def test_identical_is_zero(self, rng):
        """Test equal inputs give zero."""
        alpha = rng.random((3, 1, 8, 8))
        assert l1_alpha(_tensor(alpha), alpha).item() == 0.0

    def test_maximal_deviation(self):
        """Test all-zero against all-one gives 1."""
        assert l1_alpha(_tensor(np.zeros((2, 1, 4, 4))), np.ones((2, 1, 4, 4))).item() == pytest.approx(1.0)

    def test_matches_naive_loop(self, rng):
        """Test against an explicit element loop."""
        pred, gt = rng.random((2, 3, 1, 5, 5)), rng.random((2, 3, 1, 5, 5))
        total = 0.0
        for p, g in zip(pred.ravel(), gt.ravel()):
            total += abs(p - g)
        assert l1_alpha(_tensor(pred), gt).item() == pytest.approx(total / pred.size, abs=1e-7)

    def test_shape_mismatch(self, rng):
        """Test unequal shapes raise ShapeError."""
        with pytest.raises(ShapeError):
            l1_alpha(_tensor(rng.random((2, 1, 4, 4))), rng.random((3, 1, 4, 4)))


class TestLaplacianPyramid:
    """Test the pyramid construction and its loss."""

    def test_pyramid_extents(self, rng):
        """Test each level halves the previous one."""
        bands = laplacian_pyramid(_tensor(rng.random((1, 1, 64, 32))))
        assert [b.shape[2:] for b in bands] == [(64, 32), (32, 16), (16, 8), (8, 4), (4, 2)]

    def test_bands_reconstruct_constant(self):
        """Test a constant image has empty band-pass levels."""
        bands = laplacian_pyramid(_tensor(np.full((1, 1, 32, 32), 0.7)))
        for band in bands[:-1]:
            np.testing.assert_allclose(band.numpy(), 0.0, atol=1e-12)
        np.testing.assert_allclose(bands[-1].numpy(), 0.7, atol=1e-12)

    def test_identical_is_zero(self, rng):
        """Test equal inputs give zero."""
        alpha = rng.random((2, 1, 32, 32))
        assert laplacian_pyramid_loss(_tensor(alpha), alpha).item() == pytest.approx(0.0, abs=1e-12)

    def test_constant_offset_lands_in_residual(self):
        """Test a constant offset c only shows up in the coarsest level, weighted 16/5."""
        c = 0.2
        loss = laplacian_pyramid_loss(_tensor(np.full((1, 1, 32, 32), 0.5)), np.full((1, 1, 32, 32), 0.5 + c))
        assert loss.item() == pytest.approx(16.0 / 5.0 * c, rel=1e-9)

    def test_level_weights(self, rng):
        """Test the per-level weights (1, 2, 4, 8, 16)/5 against the standalone pyramid."""
        pred, gt = rng.random((1, 1, 32, 32)), rng.random((1, 1, 32, 32))
        pred_bands = laplacian_pyramid(_tensor(pred))
        gt_bands = laplacian_pyramid(_tensor(gt))
        expected = sum(
            weight / 5.0 * np.mean(np.abs(p.numpy() - g.numpy()))
            for weight, p, g in zip((1, 2, 4, 8, 16), pred_bands, gt_bands)
        )
        assert laplacian_pyramid_loss(_tensor(pred), gt).item() == pytest.approx(expected, rel=1e-9)

    def test_too_small(self, rng):
        """Test maps below 32 pixels cannot hold five levels."""
        with pytest.raises(ShapeError):
            laplacian_pyramid_loss(_tensor(rng.random((1, 1, 16, 64))), rng.random((1, 1, 16, 64)))

    def test_gradient(self, rng):
        """Test the pyramid loss gradient away from L1 kinks."""
        gt = rng.random((1, 1, 32, 32))
        pred = _tensor(gt + rng.choice([-1.0, 1.0], gt.shape) * rng.uniform(0.2, 0.4, gt.shape))
        error = finite_difference_check(
            lambda x: laplacian_pyramid_loss(x, gt), pred, step=1e-6, max_elements=20, floor=1e-6
        )
        assert error < 1e-3


class TestTemporalCoherence:
    """Test the temporal coherence losses."""

    def test_static_sequences(self, rng):
        """Test two static sequences give zero."""
        frame = rng.random((1, 1, 8, 8))
        pred = np.repeat(frame, 4, axis=0)
        gt = np.repeat(rng.random((1, 1, 8, 8)), 4, axis=0)
        assert temporal_coherence_alpha(_tensor(pred), gt).item() == 0.0

    def test_constant_derivative_gap(self):
        """Test a static prediction against a ramp changing δ per frame gives δ²."""
        delta = 0.1
        pred = np.full((4, 1, 4, 4), 0.3)
        gt = np.stack([np.full((1, 4, 4), 0.3 + delta * t) for t in range(4)])
        assert temporal_coherence_alpha(_tensor(pred), gt).item() == pytest.approx(delta ** 2)

    def test_matches_naive_loop(self, rng):
        """Test against explicit frame differences."""
        pred, gt = rng.random((5, 1, 4, 4)), rng.random((5, 1, 4, 4))
        squares = [
            ((pred[t] - pred[t - 1]) - (gt[t] - gt[t - 1])) ** 2 for t in range(1, 5)
        ]
        assert temporal_coherence_alpha(_tensor(pred), gt).item() == pytest.approx(np.mean(squares), abs=1e-7)

    def test_reversal_invariant(self, rng):
        """Test reversing both sequences leaves the loss unchanged."""
        pred, gt = rng.random((4, 1, 6, 6)), rng.random((4, 1, 6, 6))
        forward = temporal_coherence_alpha(_tensor(pred), gt).item()
        backward = temporal_coherence_alpha(_tensor(pred[::-1].copy()), gt[::-1].copy()).item()
        assert forward == pytest.approx(backward, rel=1e-12)

    def test_single_frame(self, rng):
        """Test one frame raises in strict mode and gives zero otherwise."""
        alpha = rng.random((1, 1, 4, 4))
        with pytest.raises(ContractError):
            temporal_coherence_alpha(_tensor(alpha), alpha)
        assert temporal_coherence_alpha(_tensor(alpha), alpha * 0.5, strict=False).item() == 0.0

    def test_batched_layout(self, rng):
        """Test B×T×C×H×W inputs difference along time, not batch."""
        pred = rng.random((2, 3, 1, 4, 4))
        gt = pred.copy()
        gt[1] = gt[1] + 0.25
        assert temporal_coherence_alpha(_tensor(pred), gt).item() == pytest.approx(0.0, abs=1e-12)


class TestForegroundLosses:
    """Test the masked foreground losses."""

    def test_empty_mask(self, rng):
        """Test zero alpha everywhere gives zero losses."""
        fg = rng.random((3, 3, 4, 4))
        l1, tc = foreground_losses(_tensor(fg), rng.random((3, 3, 4, 4)), np.zeros((3, 1, 4, 4)))
        assert l1.item() == 0.0 and tc.item() == 0.0

    def test_identical_under_full_mask(self, rng):
        """Test a perfect foreground gives zero losses."""
        fg = rng.random((3, 3, 4, 4))
        l1, tc = foreground_losses(_tensor(fg), fg, np.ones((3, 1, 4, 4)))
        assert l1.item() == 0.0 and tc.item() == 0.0

    def test_matches_masked_loop(self, rng):
        """Test against a loop over the α* > 0 pixels."""
        fg, gt = rng.random((3, 3, 4, 4)), rng.random((3, 3, 4, 4))
        alpha = np.zeros((3, 1, 4, 4))
        alpha[:, :, :, :2] = 0.5

        l1_terms, tc_terms = [], []
        for t in range(3):
            for y in range(4):
                for x in range(4):
                    if alpha[t, 0, y, x] <= 0:
                        continue
                    for c in range(3):
                        l1_terms.append(abs(fg[t, c, y, x] - gt[t, c, y, x]))
                        if t > 0:
                            gap = (fg[t, c, y, x] - fg[t - 1, c, y, x]) - (gt[t, c, y, x] - gt[t - 1, c, y, x])
                            tc_terms.append(gap * gap)

        l1, tc = foreground_losses(_tensor(fg), gt, alpha)
        assert l1.item() == pytest.approx(np.mean(l1_terms), abs=1e-7)
        assert tc.item() == pytest.approx(np.mean(tc_terms), abs=1e-7)

    def test_alpha_must_be_single_channel(self, rng):
        """Test a 3-channel alpha is rejected."""
        fg = rng.random((2, 3, 4, 4))
        with pytest.raises(ShapeError):
            foreground_losses(_tensor(fg), fg, np.ones((2, 3, 4, 4)))


class TestTotalLoss:
    """Test the weighted total."""

    def test_unit_components(self):
        """Test all components equal to one sum to 13."""
        names = ("l1_alpha", "lap_alpha", "tc_alpha", "l1_fg", "tc_fg")
        assert total_matting_loss({name: 1.0 for name in names}) == pytest.approx(13.0)

    def test_temporal_weight(self):
        """Test perturbing tc_alpha by δ moves the total by 5δ."""
        base = {"l1_alpha": 0.1, "lap_alpha": 0.2, "tc_alpha": 0.3, "l1_fg": 0.4, "tc_fg": 0.5}
        bumped = dict(base, tc_alpha=0.3 + 0.01)
        assert total_matting_loss(bumped) - total_matting_loss(base) == pytest.approx(0.05)

    def test_report_total(self):
        """Test the report's total equals the weighted sum of its components."""
        report = LossReport.from_components({"l1_alpha": 0.1, "lap_alpha": 0.2, "tc_alpha": 0.3, "l1_fg": 0.4,
                                             "tc_fg": 0.5})
        assert report.total_matting == pytest.approx(0.1 + 0.2 + 1.5 + 0.4 + 2.5)

    def test_matting_loss_on_perfect_prediction(self, matting_clip):
        """Test the combined loss is zero for the ground truth itself."""
        alpha = _tensor(matting_clip.alpha_gt)
        fg = _tensor(matting_clip.fg_gt)
        total, components = matting_loss(alpha, fg, matting_clip.alpha_gt, matting_clip.fg_gt)
        assert total.item() == pytest.approx(0.0, abs=1e-12)
        report = loss_report(components)
        assert all(value >= 0 for value in report.as_dict().values())

    def test_matting_loss_tolerates_single_frame(self, rng):
        """Test the training form skips temporal terms for one frame."""
        alpha = rng.random((1, 1, 32, 32))
        fg = rng.random((1, 3, 32, 32))
        _, components = matting_loss(_tensor(alpha), _tensor(fg), alpha * 0.5, fg * 0.5)
        assert components["tc_alpha"].item() == 0.0
        assert components["tc_fg"].item() == 0.0


class TestSegmentationBCE:
    """Test the segmentation loss."""

    def test_half_probability(self, rng):
        """Test S = 0.5 gives ln 2 whatever the mask."""
        mask = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        assert segmentation_bce(_tensor(np.zeros_like(mask)), mask).item() == pytest.approx(math.log(2))
        assert segmentation_bce(_tensor(np.full_like(mask, 0.5)), mask, from_logits=False).item() == pytest.approx(
            math.log(2)
        )

    def test_confident_correct_prediction(self):
        """Test saturated correct logits give a near-zero loss."""
        mask = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        logits = (mask * 2 - 1) * 40.0
        assert segmentation_bce(_tensor(logits), mask).item() < 1e-12

    def test_matches_naive_loop(self, rng):
        """Test against per-pixel cross entropy of the sigmoid."""
        logits = rng.normal(0, 3, (2, 1, 4, 4))
        mask = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        terms = []
        for z, s in zip(logits.ravel(), mask.ravel()):
            p = 1.0 / (1.0 + math.exp(-z))
            terms.append(-(s * math.log(p) + (1 - s) * math.log(1 - p)))
        assert segmentation_bce(_tensor(logits), mask).item() == pytest.approx(np.mean(terms), abs=1e-6)

    def test_extreme_probabilities_are_finite(self):
        """Test probabilities of exactly 0 and 1 are clamped."""
        value = segmentation_bce(_tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0]), from_logits=False).item()
        assert np.isfinite(value) and value > 0

    def test_gradient(self, rng):
        """Test the logit-form gradient."""
        mask = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        logits = _tensor(rng.normal(0, 2, (1, 1, 4, 4)))
        assert finite_difference_check(lambda x: segmentation_bce(x, mask), logits, floor=1e-3) < 1e-4
