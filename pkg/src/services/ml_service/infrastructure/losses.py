"""
Training objective: alpha losses (L1, Laplacian pyramid, temporal coherence),
masked foreground losses, the weighted matting total and segmentation BCE.

Inputs are T×C×H×W or B×T×C×H×W tensors; the time axis is the fourth from
the end. Every loss returns a scalar Tensor so it can be backpropagated.
"""
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import structlog

from src.shared.domain.exceptions import ContractError, ShapeError
from src.shared.tensor import Tensor
from src.shared.tensor import functional as F

from ..domain.entities import MATTING_LOSS_WEIGHTS, LossReport

logger = structlog.get_logger(__name__)

PYRAMID_LEVELS = 5
BINOMIAL_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
PROBABILITY_EPS = 1e-7

Scalar = Union[Tensor, float]


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: prediction and target shapes differ", a.shape, b.shape)
    if a.ndim not in (4, 5):
        raise ShapeError(f"{name}: expected T×C×H×W or B×T×C×H×W", a.shape)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def _time_slices(ndim: int) -> Tuple[tuple, tuple]:
    lead = (slice(None),) * (ndim - 4)
    return lead + (slice(1, None),), lead + (slice(None, -1),)


def _flatten_frames(x: Tensor) -> Tensor:
    return x.reshape(int(np.prod(x.shape[:-3])), *x.shape[-3:])


def l1_alpha(alpha: Tensor, alpha_gt) -> Tensor:
    """Mean absolute alpha error over every pixel of every frame."""
    alpha_gt = _as_tensor(alpha_gt, alpha)
    _same_shape("l1_alpha", alpha, alpha_gt)
    return F.mean(F.abs(alpha - alpha_gt))


def _gaussian(x: Tensor, gain: float = 1.0) -> Tensor:
    channels = x.shape[1]
    kernel = np.outer(BINOMIAL_TAPS, BINOMIAL_TAPS) * gain
    weight = Tensor(np.broadcast_to(kernel, (channels, 1, 5, 5)).astype(x.dtype))
    return F.conv2d(F.pad2d(x, 2, "reflect"), weight, None, 1, 0, 1, channels)


def _pyramid_down(x: Tensor) -> Tensor:
    return _gaussian(x)[:, :, ::2, ::2]


def _pyramid_up(x: Tensor, height: int, width: int) -> Tensor:
    up = _gaussian(F.upsample_zeros_2x(x), gain=4.0)
    return up[:, :, :height, :width]


def laplacian_pyramid(x: Tensor, levels: int = PYRAMID_LEVELS) -> List[Tensor]:
    """
    Band-pass levels of an N×C×H×W tensor, finest first.

    The first ``levels - 1`` entries are differences between a level and the
    expanded next-coarser level; the last entry is the low-pass residual.
    """
    if x.shape[2] < 2 ** levels or x.shape[3] < 2 ** levels:
        raise ShapeError(f"a {levels}-level pyramid needs extents of at least {2 ** levels}", x.shape)
    bands = []
    current = x
    for _ in range(levels - 1):
        down = _pyramid_down(current)
        bands.append(current - _pyramid_up(down, current.shape[2], current.shape[3]))
        current = down
    bands.append(current)
    return bands


def laplacian_pyramid_loss(alpha: Tensor, alpha_gt, levels: int = PYRAMID_LEVELS) -> Tensor:
    """Σ_s 2^(s−1)/levels · L1 between pyramid level s of prediction and target."""
    alpha_gt = _as_tensor(alpha_gt, alpha)
    _same_shape("laplacian_pyramid_loss", alpha, alpha_gt)
    pred_bands = laplacian_pyramid(_flatten_frames(alpha), levels)
    gt_bands = laplacian_pyramid(_flatten_frames(alpha_gt), levels)
    total: Scalar = 0.0
    for level, (p, g) in enumerate(zip(pred_bands, gt_bands)):
        total = F.mean(F.abs(p - g)) * (2.0 ** level / levels) + total
    return total


def _temporal_guard(name: str, x: Tensor, strict: bool) -> bool:
    frames = x.shape[-4]
    if frames >= 2:
        return True
    if strict:
        raise ContractError(f"{name} needs at least 2 frames, got {frames}")
    logger.warning("temporal_loss_skipped", loss=name, frames=frames)
    return False


def temporal_coherence_alpha(alpha: Tensor, alpha_gt, strict: bool = True) -> Tensor:
    """
    Mean squared difference of the predicted and true frame-to-frame changes.

    With fewer than two frames this raises, or returns 0 with a warning when
    ``strict`` is False (training path).
    """
    alpha_gt = _as_tensor(alpha_gt, alpha)
    _same_shape("temporal_coherence_alpha", alpha, alpha_gt)
    if not _temporal_guard("tc_alpha", alpha, strict):
        return _zero(alpha)
    later, earlier = _time_slices(alpha.ndim)
    gap = (alpha[later] - alpha[earlier]) - (alpha_gt[later] - alpha_gt[earlier])
    return F.mean(gap * gap)


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``values`` over pixels where the single-channel mask is set."""
    count = float(mask.sum()) * values.shape[-3]
    if count == 0:
        return _zero(values)
    return F.sum(values * Tensor(mask.astype(values.dtype))) / count


def foreground_losses(fg: Tensor, fg_gt, alpha_gt, strict: bool = True) -> Tuple[Tensor, Tensor]:
    """
    L1 and temporal-coherence foreground losses on pixels where α* > 0.

    The temporal term masks each frame difference with the later frame's
    α* > 0. Empty masks give zero losses.
    """
    fg_gt = _as_tensor(fg_gt, fg)
    alpha_gt = _as_tensor(alpha_gt, fg)
    _same_shape("foreground_losses", fg, fg_gt)
    if alpha_gt.shape[:-3] != fg.shape[:-3] or alpha_gt.shape[-2:] != fg.shape[-2:] or alpha_gt.shape[-3] != 1:
        raise ShapeError("foreground_losses: alpha must be single-channel with the foreground's extents",
                         alpha_gt.shape, fg.shape)
    mask = alpha_gt.data > 0
    l1 = _masked_mean(F.abs(fg - fg_gt), mask)

    if not _temporal_guard("tc_fg", fg, strict):
        return l1, _zero(fg)
    later, earlier = _time_slices(fg.ndim)
    gap = (fg[later] - fg[earlier]) - (fg_gt[later] - fg_gt[earlier])
    tc = _masked_mean(gap * gap, mask[later])
    return l1, tc


def total_matting_loss(components: Mapping[str, Scalar]) -> Scalar:
    """L1α + Lapα + 5·TCα + L1F + 5·TCF."""
    total: Scalar = 0.0
    for name, weight in MATTING_LOSS_WEIGHTS.items():
        total = components[name] * weight + total
    return total


def segmentation_bce(seg, seg_gt, from_logits: bool = True) -> Tensor:
    """
    Mean binary cross entropy against a {0, 1} mask.

    Probabilities are converted to logits (after clamping away from 0 and 1)
    so both forms share the stable logit evaluation.
    """
    seg = _as_tensor(seg)
    seg_gt = _as_tensor(seg_gt, seg)
    if seg.shape != seg_gt.shape:
        raise ShapeError("segmentation_bce: prediction and mask shapes differ", seg.shape, seg_gt.shape)
    logits = seg
    if not from_logits:
        p = F.clamp(seg, PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
        logits = F.log(p) - F.log(1.0 - p)
    return F.mean(F.binary_cross_entropy_with_logits(logits, seg_gt))


def matting_loss(
    alpha: Tensor,
    fg: Tensor,
    alpha_gt,
    fg_gt,
    strict: bool = False,
) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Every matting component and their weighted total.

    Returns:
        (total loss tensor, component tensors by name)
    """
    l1_fg, tc_fg = foreground_losses(fg, fg_gt, alpha_gt, strict=strict)
    components = {
        "l1_alpha": l1_alpha(alpha, alpha_gt),
        "lap_alpha": laplacian_pyramid_loss(alpha, alpha_gt),
        "tc_alpha": temporal_coherence_alpha(alpha, alpha_gt, strict=strict),
        "l1_fg": l1_fg,
        "tc_fg": tc_fg,
    }
    return total_matting_loss(components), components


def loss_report(components: Mapping[str, Scalar], seg_bce: Optional[Scalar] = None) -> LossReport:
    def value(x: Scalar) -> float:
        return float(x.item()) if isinstance(x, Tensor) else float(x)

    return LossReport.from_components(
        {name: value(x) for name, x in components.items()},
        seg_bce=None if seg_bce is None else value(seg_bce),
    )
