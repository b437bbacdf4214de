"""
The matting network: encoder, LR-ASPP, recurrent decoder, projection head
and the optional guided-filter refinement.
"""
from collections import OrderedDict
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np
import structlog

from src.shared.domain.exceptions import ConfigError, ContractError, ParameterError, ResolutionError, ShapeError
from src.shared.tensor import Conv2d, MacCounter, Module, Tensor, count_macs_scope
from src.shared.tensor import functional as F

from ..domain.entities import MattingOutput, ModelConfig, RecurrentState
from .backbone import build_backbone
from .decoder import LRASPP, RecurrentDecoder
from .guided_filter import DeepGuidedFilter, fast_guided_filter

logger = structlog.get_logger(__name__)

Upsampler = Literal["dgf", "fgf"]

# Projection channel layout: alpha, foreground RGB, segmentation
PROJECTION_SPLIT = (1, 3, 1)


def internal_resolution(height: int, width: int, downsample: float) -> Tuple[int, int]:
    """Network input extents for factor ``downsample``, rounded half-up to multiples of 16."""
    h = int(np.floor(downsample * height / 16 + 0.5)) * 16
    w = int(np.floor(downsample * width / 16 + 0.5)) * 16
    return h, w


class MattingNetwork(Module):
    """Recurrent matting network built from a ``ModelConfig``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config, rng)
        self.aspp = LRASPP(config.encoder_channels[3], config.aspp_channels, rng)
        self.decoder = RecurrentDecoder(config.encoder_channels, config.decoder_channels, rng)
        self.project = Conv2d(config.hidden_channels, sum(PROJECTION_SPLIT), 1, rng=rng)
        self.refiner = DeepGuidedFilter(config.hidden_channels, config.dgf_channels, rng)

    def encode(self, frames: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """Features at 1/2, 1/4, 1/8 and 1/16 of an N×3×H×W batch."""
        return self.backbone(frames)

    def _decode(
        self,
        features: Sequence[Tensor],
        frames_lr: Tensor,
        state: Optional[RecurrentState],
        batch: int,
        time: int,
        recurrence: bool,
    ):
        if state is None:
            state = RecurrentState.fresh()
        state.validate_for(self.config, batch, frames_lr.shape[2], frames_lr.shape[3])
        f2, f4, f8, f16 = features
        hidden, new_state, history = self.decoder(
            frames_lr, (f2, f4, f8, self.aspp(f16)), state, batch, time, recurrence
        )
        alpha, fg, seg = F.split(self.project(hidden), list(PROJECTION_SPLIT), axis=1)
        return alpha, fg, seg, hidden, new_state, history

    def decode_step(
        self,
        features: Sequence[Tensor],
        frames_lr: Tensor,
        state: Optional[RecurrentState] = None,
        recurrence: bool = True,
    ) -> Tuple[MattingOutput, RecurrentState]:
        """
        Decode one chunk of frames at network resolution.

        Args:
            features: encoder maps for the (B·T)-flattened frames
            frames_lr: B×T×3×h×w frames the features were computed from
            state: carried recurrent state, zeros when omitted

        Returns:
            (clamped output at network resolution, new state)
        """
        if frames_lr.ndim != 5:
            raise ShapeError("decode_step expects B×T×3×H×W frames", frames_lr.shape)
        batch, time, channels, height, width = frames_lr.shape
        flat = frames_lr.reshape(batch * time, channels, height, width)
        alpha, fg, seg, hidden, new_state, history = self._decode(features, flat, state, batch, time, recurrence)
        output = _package(batch, time, F.clamp(alpha, 0.0, 1.0), F.clamp(fg, 0.0, 1.0), seg, hidden)
        return output, new_state

    def forward(
        self,
        frames: Tensor,
        state: Optional[RecurrentState] = None,
        downsample: float = 1.0,
        use_dgf: bool = False,
        recurrence: bool = True,
        return_intermediates: bool = False,
        upsampler: Upsampler = "dgf",
    ) -> Tuple[MattingOutput, RecurrentState]:
        """
        Predict alpha, foreground and segmentation for a B×T×3×H×W clip.

        Args:
            frames: input clip in [0, 1]
            state: recurrent state carried from the previous chunk
            downsample: factor s applied before the encoder-decoder
            use_dgf: refine to full resolution with the guided-filter head (needs s < 1)
            recurrence: False passes a zero state to every time step
            return_intermediates: attach per-step state snapshots to the output
            upsampler: "dgf" (learned head) or "fgf" (fast guided filter)

        Returns:
            (MattingOutput at full input resolution, state after the last frame)
        """
        if frames.ndim != 5 or frames.shape[2] != 3:
            raise ShapeError("forward expects B×T×3×H×W frames", frames.shape)
        if not 0.0 < downsample <= 1.0:
            raise ParameterError(f"downsample factor must be in (0, 1], got {downsample}")
        if use_dgf and downsample >= 1.0:
            raise ContractError("guided-filter refinement needs a downsample factor below 1")
        if upsampler not in ("dgf", "fgf"):
            raise ParameterError(f"unknown upsampler '{upsampler}'")

        batch, time, _, height, width = frames.shape
        flat = frames.reshape(batch * time, 3, height, width)
        if downsample < 1.0:
            h_lr, w_lr = internal_resolution(height, width, downsample)
            if h_lr < 16 or w_lr < 16:
                raise ResolutionError(
                    f"downsample {downsample} turns {height}x{width} into {h_lr}x{w_lr}; at least 16x16 is needed"
                )
            src_lr = F.bilinear_resize(flat, h_lr, w_lr)
        else:
            if height % 16 or width % 16:
                raise ShapeError("frame extents must be divisible by 16; pad the frames first", frames.shape)
            src_lr = flat

        features = self.encode(src_lr)
        alpha, fg, seg, hidden, new_state, history = self._decode(
            features, src_lr, state, batch, time, recurrence
        )

        if downsample < 1.0:
            if use_dgf and upsampler == "dgf":
                alpha, fg = self.refiner(src_lr, alpha, fg, hidden, flat)
            elif use_dgf:
                alpha = F.clamp(fast_guided_filter(alpha, _gray(src_lr), _gray(flat)), 0.0, 1.0)
                fg = F.clamp(fast_guided_filter(fg, src_lr, flat), 0.0, 1.0)
            else:
                alpha = F.clamp(F.bilinear_resize(alpha, height, width), 0.0, 1.0)
                fg = F.clamp(F.bilinear_resize(fg, height, width), 0.0, 1.0)
            seg = F.bilinear_resize(seg, height, width)
        else:
            alpha = F.clamp(alpha, 0.0, 1.0)
            fg = F.clamp(fg, 0.0, 1.0)

        output = _package(batch, time, alpha, fg, seg, hidden)
        if return_intermediates:
            output.state_history = history
        return output, new_state


def _gray(x: Tensor) -> Tensor:
    return F.mean(x, axis=1, keepdims=True)


def _package(batch: int, time: int, alpha: Tensor, fg: Tensor, seg: Tensor, hidden: Tensor) -> MattingOutput:
    def unflatten(t: Tensor) -> Tensor:
        return t.reshape(batch, time, *t.shape[1:])

    return MattingOutput(
        alpha=unflatten(alpha),
        foreground=unflatten(fg),
        segmentation_logits=unflatten(seg),
        final_hidden=unflatten(hidden),
    )


def build_model(config: Optional[ModelConfig] = None, seed: int = 0) -> MattingNetwork:
    """Build a network with parameters drawn deterministically from ``seed``."""
    config = config or ModelConfig.default()
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"expected a ModelConfig, got {type(config).__name__}")
    model = MattingNetwork(config, np.random.default_rng(seed))
    logger.debug("model_built", backbone=config.backbone.value, seed=seed, parameters=count_params(model))
    return model


def encode(model: MattingNetwork, frames: Tensor):
    return model.encode(frames)


def decode_step(model: MattingNetwork, features, downsampled_frames: Tensor, state: Optional[RecurrentState] = None):
    return model.decode_step(features, downsampled_frames, state)


def forward(
    model: MattingNetwork,
    frames: Tensor,
    state: Optional[RecurrentState] = None,
    s: float = 1.0,
    use_dgf: bool = False,
    **kwargs,
) -> Tuple[MattingOutput, RecurrentState]:
    return model.forward(frames, state, downsample=s, use_dgf=use_dgf, **kwargs)


def parameter_breakdown(model: MattingNetwork) -> Dict[str, int]:
    """Parameter count per block, in network order."""
    decoder = model.decoder
    blocks = OrderedDict(
        [
            ("backbone", model.backbone),
            ("aspp", model.aspp),
            ("decoder.bottleneck", decoder.bottleneck),
            ("decoder.decode8", decoder.decode8),
            ("decoder.decode4", decoder.decode4),
            ("decoder.decode2", decoder.decode2),
            ("decoder.output", decoder.output),
            ("project", model.project),
            ("refiner", model.refiner),
        ]
    )
    return OrderedDict((name, block.num_parameters()) for name, block in blocks.items())


def count_params(model: MattingNetwork) -> int:
    return int(sum(parameter_breakdown(model).values()))


def _mac_counter(model: MattingNetwork, height: int, width: int, s: float, use_dgf: Optional[bool]) -> MacCounter:
    use_dgf = s < 1.0 if use_dgf is None else use_dgf
    was_training = model.training
    model.eval()
    try:
        frames = Tensor(np.zeros((1, 1, 3, height, width), dtype=np.float32))
        with count_macs_scope() as counter:
            model.forward(frames, downsample=s, use_dgf=use_dgf)
    finally:
        model.train(was_training)
    return counter


def count_macs(model: MattingNetwork, height: int, width: int, s: float = 1.0, use_dgf: Optional[bool] = None) -> int:
    """
    Multiply-accumulates of one frame at ``height`` × ``width``.

    Sums C_out·C_in/groups·k²·H_out·W_out over convolutions on spatial maps.
    The 1×1 convolutions applied to globally pooled vectors (squeeze-excitation
    and the LR-ASPP gate) are excluded; ``count_pooled_macs`` reports them.
    """
    return int(_mac_counter(model, height, width, s, use_dgf).total)


def count_pooled_macs(
    model: MattingNetwork, height: int, width: int, s: float = 1.0, use_dgf: Optional[bool] = None
) -> int:
    """MACs of the convolutions over globally pooled vectors, which do not scale with frame area."""
    return int(_mac_counter(model, height, width, s, use_dgf).pooled)
