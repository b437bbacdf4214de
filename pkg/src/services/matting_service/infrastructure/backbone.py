"""
Per-frame feature-extraction encoders.

Both encoders take an N×3×H×W batch (H, W divisible by 16) and return the
feature maps at 1/2, 1/4, 1/8 and 1/16 scale.
"""
from typing import List, NamedTuple, Tuple

import numpy as np

from src.shared.domain.exceptions import ConfigError, ShapeError
from src.shared.tensor import Activation, Conv2d, Module, ModuleList, Sequential, Tensor, conv_bn_act
from src.shared.tensor import functional as F

from ..domain.entities import BackboneType, ModelConfig


class InvertedResidualConfig(NamedTuple):
    in_channels: int
    kernel: int
    expanded: int
    out_channels: int
    use_se: bool
    activation: str
    stride: int
    dilation: int


# MobileNetV3-Large layer table. The last three rows run at stride 1 with
# dilation 2 so the deepest features stay at 1/16 scale.
MOBILENET_V3_LARGE_BLOCKS: Tuple[InvertedResidualConfig, ...] = (
    InvertedResidualConfig(16, 3, 16, 16, False, "relu", 1, 1),
    InvertedResidualConfig(16, 3, 64, 24, False, "relu", 2, 1),
    InvertedResidualConfig(24, 3, 72, 24, False, "relu", 1, 1),
    InvertedResidualConfig(24, 5, 72, 40, True, "relu", 2, 1),
    InvertedResidualConfig(40, 5, 120, 40, True, "relu", 1, 1),
    InvertedResidualConfig(40, 5, 120, 40, True, "relu", 1, 1),
    InvertedResidualConfig(40, 3, 240, 80, False, "hardswish", 2, 1),
    InvertedResidualConfig(80, 3, 200, 80, False, "hardswish", 1, 1),
    InvertedResidualConfig(80, 3, 184, 80, False, "hardswish", 1, 1),
    InvertedResidualConfig(80, 3, 184, 80, False, "hardswish", 1, 1),
    InvertedResidualConfig(80, 3, 480, 112, True, "hardswish", 1, 1),
    InvertedResidualConfig(112, 3, 672, 112, True, "hardswish", 1, 1),
    InvertedResidualConfig(112, 5, 672, 160, True, "hardswish", 1, 2),
    InvertedResidualConfig(160, 5, 960, 160, True, "hardswish", 1, 2),
    InvertedResidualConfig(160, 5, 960, 160, True, "hardswish", 1, 2),
)

STEM_CHANNELS = 16
LAST_CHANNELS = 960

# Indices into the feature stack whose outputs are the 1/2, 1/4, 1/8, 1/16 taps
FEATURE_TAPS = (1, 3, 6, 16)


def make_divisible(value: float, divisor: int = 8) -> int:
    rounded = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * value:
        rounded += divisor
    return rounded


def _check_extents(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError("encoder expects N×3×H×W frames", x.shape)
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ShapeError("frame extents must be divisible by 16; pad the frames first", x.shape)


class SqueezeExcitation(Module):
    """Channel gating from globally pooled features."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        squeeze = make_divisible(channels // 4, 8)
        self.fc1 = Conv2d(channels, squeeze, 1, rng=rng)
        self.fc2 = Conv2d(squeeze, channels, 1, rng=rng)
        self.fc1.on_pooled = True
        self.fc2.on_pooled = True

    def forward(self, x: Tensor) -> Tensor:
        scale = F.relu(self.fc1(F.global_avg_pool(x)))
        scale = F.hardsigmoid(self.fc2(scale))
        return x * scale


class InvertedResidual(Module):
    """Expand, depthwise, optional squeeze-excitation, project."""

    def __init__(self, cfg: InvertedResidualConfig, rng: np.random.Generator):
        super().__init__()
        self.use_residual = cfg.stride == 1 and cfg.in_channels == cfg.out_channels
        self.expand = None
        if cfg.expanded != cfg.in_channels:
            self.expand = conv_bn_act(cfg.in_channels, cfg.expanded, 1, rng, cfg.activation)
        self.depthwise = conv_bn_act(
            cfg.expanded, cfg.expanded, cfg.kernel, rng, cfg.activation,
            stride=cfg.stride, dilation=cfg.dilation, groups=cfg.expanded,
        )
        self.se = SqueezeExcitation(cfg.expanded, rng) if cfg.use_se else None
        self.project = conv_bn_act(cfg.expanded, cfg.out_channels, 1, rng, activation=None)

    def forward(self, x: Tensor) -> Tensor:
        out = self.expand(x) if self.expand is not None else x
        out = self.depthwise(out)
        if self.se is not None:
            out = self.se(out)
        out = self.project(out)
        if self.use_residual:
            out = out + x
        return out


class MobileNetV3LargeEncoder(Module):
    """MobileNetV3-Large feature stack with a dilated final stage."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        layers: List[Module] = [conv_bn_act(3, STEM_CHANNELS, 3, rng, "hardswish", stride=2)]
        layers.extend(InvertedResidual(cfg, rng) for cfg in MOBILENET_V3_LARGE_BLOCKS)
        layers.append(conv_bn_act(MOBILENET_V3_LARGE_BLOCKS[-1].out_channels, LAST_CHANNELS, 1, rng, "hardswish"))
        self.features = ModuleList(layers)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        _check_extents(x)
        taps = []
        for index, layer in enumerate(self.features):
            x = layer(x)
            if index in FEATURE_TAPS:
                taps.append(x)
        return tuple(taps)


class TinyEncoder(Module):
    """Four stride-2 conv+BN+hardswish layers for fast tests."""

    def __init__(self, channels: Tuple[int, int, int, int], rng: np.random.Generator):
        super().__init__()
        widths = (3, *channels)
        self.stages = ModuleList(
            conv_bn_act(widths[i], widths[i + 1], 3, rng, "hardswish", stride=2) for i in range(4)
        )

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        _check_extents(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return tuple(taps)


def build_backbone(config: ModelConfig, rng: np.random.Generator) -> Module:
    """Instantiate the encoder named by ``config.backbone``."""
    if config.backbone == BackboneType.MOBILENET_V3_LARGE:
        return MobileNetV3LargeEncoder(rng)
    if config.backbone == BackboneType.TINY_TEST:
        return TinyEncoder(config.encoder_channels, rng)
    raise ConfigError(f"backbone '{config.backbone.value}' has a channel table but no encoder implementation")
