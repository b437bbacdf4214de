"""
Error hierarchy for the matting engine.

Contract-style errors (bad shapes, bad parameters, bad configs) derive from
``ContractError`` so the command line can map them to one exit code.
"""
from typing import Optional, Sequence


class MattingError(Exception):
    """Root of every error raised by this package."""


class ContractError(MattingError):
    """A documented precondition was violated."""


class ShapeError(ContractError):
    """Tensor extents do not match what an operation requires."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            rendered = " vs ".join(str(tuple(s)) for s in shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class ParameterError(ContractError):
    """A scalar parameter is outside its legal range."""


class ConfigError(ContractError):
    """A configuration object is invalid."""


class AugmentationConfigError(ConfigError):
    """An augmentation configuration is degenerate."""


class StateResetError(ContractError):
    """A recurrent state no longer matches the frames it is fed with."""


class ResolutionError(ContractError):
    """The requested downsample factor yields maps that are too small."""


class GradientError(MattingError):
    """A gradient is not finite."""

    def __init__(self, parameter: str, message: str = "non-finite gradient"):
        super().__init__(f"{message} for parameter '{parameter}'")
        self.parameter = parameter


class DivergenceError(MattingError):
    """Training loss became NaN or infinite."""

    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class CheckpointError(MattingError):
    """A checkpoint file cannot be used."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint container version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The checkpoint file ended before its declared payload."""


class CheckpointConfigMismatchError(CheckpointError, ContractError):
    """The checkpoint was written for a different model configuration."""


class FrameIOError(MattingError):
    """Frames could not be read or written."""
