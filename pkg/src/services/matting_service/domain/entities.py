"""
Matting service domain entities: model configuration, recurrent state and
network outputs.
"""
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError, model_validator
from scipy.special import expit

from src.shared.domain.base import ArrayEntity, ValueObject
from src.shared.domain.exceptions import ConfigError, StateResetError
from src.shared.tensor import Tensor

# Decoder scales carrying a ConvGRU, coarse to fine
RECURRENT_SCALES: Tuple[int, ...] = (16, 8, 4, 2)

MOBILENET_V3_LARGE_CHANNELS: Tuple[int, int, int, int] = (16, 24, 40, 960)


class BackboneType(str, Enum):
    """Feature-extraction encoders."""
    MOBILENET_V3_LARGE = "mobilenet_v3_large"
    TINY_TEST = "tiny_test"
    RESNET50 = "resnet50"


class ModelConfig(ValueObject):
    """
    Backbone choice plus channel widths per scale.

    ``encoder_channels`` are E at 1/2, 1/4, 1/8, 1/16; ``decoder_channels``
    are D at 1/16, 1/8, 1/4, 1/2, 1/1.
    """
    backbone: BackboneType = BackboneType.MOBILENET_V3_LARGE
    encoder_channels: Tuple[int, int, int, int] = MOBILENET_V3_LARGE_CHANNELS
    aspp_channels: int = 128
    decoder_channels: Tuple[int, int, int, int, int] = (128, 80, 40, 32, 16)
    dgf_channels: int = 16

    @model_validator(mode="after")
    def _check_channels(self) -> "ModelConfig":
        widths = (*self.encoder_channels, self.aspp_channels, *self.decoder_channels, self.dgf_channels)
        if any(width < 1 for width in widths):
            raise ConfigError(f"channel widths must be positive, got {widths}")
        odd = [d for d in self.decoder_channels[:4] if d % 2]
        if odd:
            raise ConfigError(f"decoder channels at recurrent scales must be even, got {list(self.decoder_channels[:4])}")
        if self.aspp_channels != self.decoder_channels[0]:
            raise ConfigError(
                f"bottleneck width D_1/16={self.decoder_channels[0]} must equal aspp width {self.aspp_channels}"
            )
        if self.backbone == BackboneType.MOBILENET_V3_LARGE and tuple(self.encoder_channels) != MOBILENET_V3_LARGE_CHANNELS:
            raise ConfigError(f"mobilenet_v3_large emits {MOBILENET_V3_LARGE_CHANNELS}, got {self.encoder_channels}")
        return self

    @classmethod
    def default(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny_test(cls) -> "ModelConfig":
        """Desk-scale widths used by the test suite and the overfit smoke run."""
        return cls(
            backbone=BackboneType.TINY_TEST,
            encoder_channels=(4, 6, 8, 16),
            aspp_channels=8,
            decoder_channels=(8, 8, 8, 8, 4),
        )

    @classmethod
    def resnet50_large(cls) -> "ModelConfig":
        """Channel table of the large variant; no encoder is provided for it."""
        return cls(
            backbone=BackboneType.RESNET50,
            encoder_channels=(64, 256, 512, 2048),
            aspp_channels=256,
            decoder_channels=(256, 128, 64, 32, 16),
        )

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        presets = {"default": cls.default, "tiny_test": cls.tiny_test, "resnet50_large": cls.resnet50_large}
        if name not in presets:
            raise ConfigError(f"unknown model preset '{name}'; choose from {sorted(presets)}")
        return presets[name]()

    @classmethod
    def parse(cls, data: Dict[str, Any]) -> "ModelConfig":
        """
        Validate a plain mapping, raising ``ConfigError`` on any problem.

        A ``preset`` key starts from a named configuration; the remaining keys
        override its fields.
        """
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is not None:
            data = {**cls.preset(preset).model_dump(), **data}
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc

    @property
    def recurrent_channels(self) -> Tuple[int, ...]:
        """Hidden-state widths D_k/2 for scales 1/16, 1/8, 1/4, 1/2."""
        return tuple(d // 2 for d in self.decoder_channels[:4])

    @property
    def hidden_channels(self) -> int:
        """Width of the final hidden features (D_1/1)."""
        return self.decoder_channels[4]


class RecurrentState(ArrayEntity):
    """
    Hidden maps carried across frames, ordered 1/16, 1/8, 1/4, 1/2.

    ``None`` entries stand for the all-zero initial state.
    """
    hidden: List[Optional[Tensor]] = [None, None, None, None]

    @classmethod
    def fresh(cls) -> "RecurrentState":
        return cls(hidden=[None] * len(RECURRENT_SCALES))

    @classmethod
    def zeros(cls, config: ModelConfig, batch: int, height: int, width: int, dtype=np.float32) -> "RecurrentState":
        """Explicit zero state for a network input of ``height`` × ``width``."""
        maps = [
            Tensor(np.zeros((batch, channels, height // scale, width // scale), dtype=dtype))
            for channels, scale in zip(config.recurrent_channels, RECURRENT_SCALES)
        ]
        return cls(hidden=maps)

    @property
    def is_fresh(self) -> bool:
        return all(h is None for h in self.hidden)

    def expected_shapes(self, config: ModelConfig, batch: int, height: int, width: int) -> List[Tuple[int, ...]]:
        return [
            (batch, channels, height // scale, width // scale)
            for channels, scale in zip(config.recurrent_channels, RECURRENT_SCALES)
        ]

    def validate_for(self, config: ModelConfig, batch: int, height: int, width: int) -> None:
        """Raise ``StateResetError`` if the state was built for other frames."""
        if len(self.hidden) != len(RECURRENT_SCALES):
            raise StateResetError(f"state must hold {len(RECURRENT_SCALES)} maps, got {len(self.hidden)}")
        for h, expected, scale in zip(self.hidden, self.expected_shapes(config, batch, height, width), RECURRENT_SCALES):
            if h is not None and tuple(h.shape) != expected:
                raise StateResetError(
                    f"recurrent state at 1/{scale} has shape {tuple(h.shape)}, frames need {expected}; "
                    "reset the state when the resolution or batch changes"
                )

    def detach(self) -> "RecurrentState":
        return RecurrentState(hidden=[h.detach() if h is not None else None for h in self.hidden])

    def max_abs(self) -> float:
        values = [float(np.max(np.abs(h.data))) for h in self.hidden if h is not None]
        return max(values) if values else 0.0


class MattingOutput(ArrayEntity):
    """
    Per-frame predictions, each laid out B×T×C×H×W.

    alpha and foreground are clamped to [0, 1]; segmentation logits are raw.
    ``final_hidden`` stays at the network's internal resolution.
    """
    alpha: Tensor
    foreground: Tensor
    segmentation_logits: Tensor
    final_hidden: Tensor
    state_history: Optional[List[RecurrentState]] = None

    @property
    def batch(self) -> int:
        return self.alpha.shape[0]

    @property
    def frames(self) -> int:
        return self.alpha.shape[1]

    def segmentation_probability(self) -> np.ndarray:
        return expit(self.segmentation_logits.data)
