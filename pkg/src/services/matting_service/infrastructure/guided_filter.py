"""
High-resolution refinement: the non-learned fast guided filter and the
learnable deep guided filter head.
"""
from typing import Tuple

import numpy as np

from src.shared.domain.exceptions import ParameterError, ShapeError
from src.shared.tensor import Activation, Conv2d, Module, Sequential, Tensor
from src.shared.tensor import functional as F

BOX_RADIUS = 1
# foreground RGB plus alpha
OUTPUT_CHANNELS = 4


def _gray(x: Tensor) -> Tensor:
    return F.mean(x, axis=1, keepdims=True)


def _check_pair(src_lr: Tensor, guide_lr: Tensor, guide_hr: Tensor) -> None:
    if src_lr.ndim != 4 or guide_lr.ndim != 4 or guide_hr.ndim != 4:
        raise ShapeError("guided filter expects rank-4 inputs", src_lr.shape, guide_lr.shape, guide_hr.shape)
    if src_lr.shape[0] != guide_lr.shape[0] or src_lr.shape[2:] != guide_lr.shape[2:]:
        raise ShapeError("low-resolution source and guide must share extents", src_lr.shape, guide_lr.shape)
    if guide_hr.shape[:2] != guide_lr.shape[:2]:
        raise ShapeError("high-resolution guide must match the low-resolution guide channels", guide_lr.shape,
                         guide_hr.shape)
    if guide_hr.shape[2] < guide_lr.shape[2] or guide_hr.shape[3] < guide_lr.shape[3]:
        raise ShapeError("high-resolution guide is smaller than the low-resolution guide", guide_lr.shape,
                         guide_hr.shape)


def fast_guided_filter(
    src_lr: Tensor,
    guide_lr: Tensor,
    guide_hr: Tensor,
    radius: int = 1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Joint upsampling of ``src_lr`` guided by ``guide_hr``.

    The local linear coefficients a = cov(G, S) / (var(G) + eps) and
    b = mean(S) - a * mean(G) are computed at low resolution with a
    normalized box filter, bilinearly upsampled and applied to the
    high-resolution guide. A multi-channel guide is reduced to gray unless it
    has exactly as many channels as the source.

    Args:
        src_lr: N×C×h×w signal to upsample
        guide_lr: N×G×h×w guide at the source resolution
        guide_hr: N×G×H×W guide at the target resolution
        radius: box filter radius (>= 1)
        eps: regularization (> 0)

    Returns:
        N×C×H×W filtered output
    """
    if radius < 1:
        raise ParameterError(f"guided filter radius must be >= 1, got {radius}")
    if eps <= 0:
        raise ParameterError(f"guided filter eps must be positive, got {eps}")
    _check_pair(src_lr, guide_lr, guide_hr)

    if guide_lr.shape[1] not in (1, src_lr.shape[1]):
        guide_lr, guide_hr = _gray(guide_lr), _gray(guide_hr)

    mean_g = F.box_filter(guide_lr, radius)
    mean_s = F.box_filter(src_lr, radius)
    cov = F.box_filter(guide_lr * src_lr, radius) - mean_g * mean_s
    var = F.box_filter(guide_lr * guide_lr, radius) - mean_g * mean_g
    a = cov / (var + eps)
    b = mean_s - a * mean_g

    height, width = guide_hr.shape[2], guide_hr.shape[3]
    a_hr = F.bilinear_resize(a, height, width)
    b_hr = F.bilinear_resize(b, height, width)
    return a_hr * guide_hr + b_hr


class DeepGuidedFilter(Module):
    """
    Learnable guided-filter head.

    A guide transform of two 1×1 conv + ReLU layers maps the frame to
    ``channels`` guide features at both resolutions. 1×1 convolutions over
    [guide features, foreground, alpha, hidden features] at low resolution
    predict a local linear model from the guide features to each of the four
    output channels; b follows from the radius-1 window means so that
    out = A·mean(G) + b reproduces mean(S). A and b are upsampled and applied
    to the high-resolution guide features.
    """

    def __init__(self, hidden_channels: int, channels: int = 16, rng: np.random.Generator = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.hidden_channels = hidden_channels
        self.channels = channels
        self.guide = Sequential(
            Conv2d(3, channels, 1, rng=rng),
            Activation("relu"),
            Conv2d(channels, channels, 1, rng=rng),
            Activation("relu"),
        )
        self.coefficients = Sequential(
            Conv2d(channels + OUTPUT_CHANNELS + hidden_channels, channels, 1, rng=rng),
            Activation("relu"),
            Conv2d(channels, OUTPUT_CHANNELS * channels, 1, rng=rng),
        )

    def _linear_model(self, a: Tensor, guide: Tensor) -> Tensor:
        # a: N×(4·K)×H×W, guide: N×K×H×W -> N×4×H×W
        n, k, height, width = guide.shape
        a = F.reshape(a, (n, OUTPUT_CHANNELS, k, height, width))
        return F.sum(a * F.reshape(guide, (n, 1, k, height, width)), axis=2)

    def forward(
        self,
        frame_lr: Tensor,
        alpha_lr: Tensor,
        fg_lr: Tensor,
        hidden_lr: Tensor,
        frame_hr: Tensor,
    ) -> Tuple[Tensor, Tensor]:
        lr_extent = frame_lr.shape[2:]
        for name, t in (("alpha", alpha_lr), ("foreground", fg_lr), ("hidden", hidden_lr)):
            if t.shape[2:] != lr_extent or t.shape[0] != frame_lr.shape[0]:
                raise ShapeError(f"low-resolution {name} must match the low-resolution frame", t.shape, frame_lr.shape)
        if frame_hr.shape[:2] != frame_lr.shape[:2]:
            raise ShapeError("high-resolution frame must match the low-resolution frame", frame_hr.shape,
                             frame_lr.shape)
        if hidden_lr.shape[1] != self.hidden_channels:
            raise ShapeError("hidden features have the wrong width", hidden_lr.shape, (self.hidden_channels,))

        guide_lr = self.guide(frame_lr)
        guide_hr = self.guide(frame_hr)
        src = F.concat([fg_lr, alpha_lr], axis=1)

        a = self.coefficients(F.concat([guide_lr, src, hidden_lr], axis=1))
        b = F.box_filter(src, BOX_RADIUS) - self._linear_model(a, F.box_filter(guide_lr, BOX_RADIUS))

        height, width = frame_hr.shape[2], frame_hr.shape[3]
        out = self._linear_model(F.bilinear_resize(a, height, width), guide_hr) + F.bilinear_resize(b, height, width)
        fg, alpha = F.split(out, [3, 1], axis=1)
        return F.clamp(alpha, 0.0, 1.0), F.clamp(fg, 0.0, 1.0)


def deep_guided_filter(
    alpha_lr: Tensor,
    fg_lr: Tensor,
    hidden_lr: Tensor,
    frame_hr: Tensor,
    frame_lr: Tensor,
    params: DeepGuidedFilter,
) -> Tuple[Tensor, Tensor]:
    """Functional entry point; returns (alpha_hr, fg_hr), both clamped to [0, 1]."""
    return params(frame_lr, alpha_lr, fg_lr, hidden_lr, frame_hr)
