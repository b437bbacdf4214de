"""
Clip inference on numpy frame stacks.

Streaming mode feeds one frame at a time and carries the recurrent state;
batch mode feeds chunks of frames through one forward call. Both produce the
same mattes in inference mode.
"""
from typing import Iterator, Optional, Tuple

import numpy as np
import structlog

from src.shared.domain.exceptions import ContractError, ShapeError
from src.shared.tensor import Tensor

from ..domain.entities import RecurrentState
from .network import MattingNetwork

logger = structlog.get_logger(__name__)

SIZE_MULTIPLE = 16


def pad_to_multiple(frames: np.ndarray, multiple: int = SIZE_MULTIPLE) -> Tuple[np.ndarray, Tuple[int, int]]:
    """
    Edge-pad T×C×H×W frames on the bottom and right to a multiple of ``multiple``.

    Returns:
        (padded frames, (rows added, columns added))
    """
    height, width = frames.shape[-2:]
    pad_h = (-height) % multiple
    pad_w = (-width) % multiple
    if pad_h == 0 and pad_w == 0:
        return frames, (0, 0)
    logger.warning("frames_padded", height=height, width=width, pad_rows=pad_h, pad_cols=pad_w, multiple=multiple)
    widths = [(0, 0)] * (frames.ndim - 2) + [(0, pad_h), (0, pad_w)]
    return np.pad(frames, widths, mode="edge"), (pad_h, pad_w)


def crop_padding(planes: np.ndarray, padding: Tuple[int, int]) -> np.ndarray:
    pad_h, pad_w = padding
    height, width = planes.shape[-2:]
    return planes[..., : height - pad_h, : width - pad_w]


class MattingInference:
    """
    Runs a trained network over frame stacks in inference mode.

    Args:
        model: network; switched to inference mode
        downsample: factor s applied before the encoder-decoder
        use_dgf: refine with the guided-filter head (needs s < 1)
        upsampler: "dgf" or "fgf"
    """

    def __init__(self, model: MattingNetwork, downsample: float = 1.0, use_dgf: bool = False,
                 upsampler: str = "dgf"):
        if use_dgf and downsample >= 1.0:
            raise ContractError(
                "guided-filter refinement upsamples from a downsampled pass; pick a downsample factor below 1 "
                "or turn the guided filter off"
            )
        self.model = model.eval()
        self.downsample = downsample
        self.use_dgf = use_dgf
        self.upsampler = upsampler
        self.state: Optional[RecurrentState] = None

    def reset(self) -> None:
        self.state = None

    def _run(self, frames: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        output, self.state = self.model.forward(
            Tensor(frames[None]),
            self.state,
            downsample=self.downsample,
            use_dgf=self.use_dgf,
            upsampler=self.upsampler,
        )
        self.state = self.state.detach()
        return output.alpha.numpy()[0], output.foreground.numpy()[0]

    def stream(self, frames: np.ndarray) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Yield (alpha 1×H×W, foreground 3×H×W) frame by frame."""
        for frame in frames:
            alpha, fg = self._run(frame[None])
            yield alpha[0], fg[0]

    def batch(self, frames: np.ndarray, chunk: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Mattes of T frames, ``chunk`` frames per forward call (all at once by default)."""
        chunk = chunk or len(frames)
        alphas, fgs = [], []
        for start in range(0, len(frames), chunk):
            alpha, fg = self._run(frames[start:start + chunk])
            alphas.append(alpha)
            fgs.append(fg)
        return np.concatenate(alphas), np.concatenate(fgs)


def infer_clip(
    model: MattingNetwork,
    frames: np.ndarray,
    downsample: float = 1.0,
    use_dgf: bool = False,
    streaming: bool = True,
    chunk: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Alpha (T×1×H×W) and foreground (T×3×H×W) of a T×3×H×W clip in [0, 1].

    Frames whose extents are not multiples of 16 are padded for a full
    resolution pass and the outputs cropped back.
    """
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError("inference expects T×3×H×W frames", frames.shape)
    frames = frames.astype(np.float32, copy=False)
    padding = (0, 0)
    if downsample >= 1.0:
        frames, padding = pad_to_multiple(frames)

    runner = MattingInference(model, downsample, use_dgf)
    if streaming:
        pairs = list(runner.stream(frames))
        alpha = np.stack([a for a, _ in pairs])
        fg = np.stack([f for _, f in pairs])
    else:
        alpha, fg = runner.batch(frames, chunk)
    logger.info("clip_inferred", frames=len(frames), streaming=streaming, downsample=downsample, dgf=use_dgf)
    return crop_padding(alpha, padding), crop_padding(fg, padding)
