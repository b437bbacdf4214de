"""
Temporal augmentation: reversal, speed change, pausing and frame skipping.

Every operation only reorders frame indices, so all planes (frames and labels)
stay aligned and values are copied bit-exactly.
"""
from typing import Optional

import numpy as np
import structlog

from src.shared.domain.exceptions import ContractError

from ..domain.entities import ClipKind, ClipSample, TemporalAugmentConfig

logger = structlog.get_logger(__name__)


def frame_indices(length: int, ops: TemporalAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Source frame index for every output frame.

    Args:
        length: source clip length
        ops: temporal operations
        rng: picks the pause position when ``ops.pause_at`` is unset

    Returns:
        int64 index array of the requested output length
    """
    indices = np.arange(length)
    if ops.reverse:
        indices = indices[::-1]

    if ops.speed != 1.0:
        positions = np.floor(np.arange(0.0, length, ops.speed)).astype(np.int64)
        indices = indices[np.clip(positions, 0, length - 1)]

    if ops.pause_length > 0:
        at = ops.pause_at if ops.pause_at is not None else int(rng.integers(0, len(indices)))
        at = min(at, len(indices) - 1)
        held = np.full(ops.pause_length, indices[at])
        indices = np.concatenate([indices[: at + 1], held, indices[at + 1:]])

    target = ops.length or length
    if ops.skip_every:
        keep = (np.arange(len(indices)) + 1) % ops.skip_every != 0
        indices = indices[keep]
        available = len(np.unique(indices))
        if target > available:
            raise ContractError(
                f"requested {target} frames but skipping every {ops.skip_every}th frame leaves {available} unique frames"
            )

    if len(indices) >= target:
        return indices[:target]
    # stretch by index resampling
    picks = np.floor(np.arange(target) * len(indices) / target).astype(np.int64)
    return indices[picks]


def temporal_augment(clip: ClipSample, ops: TemporalAugmentConfig, seed: Optional[int] = None) -> ClipSample:
    """Reorder the clip's frames (and labels) with ``ops``; requires at least two frames."""
    if clip.kind is ClipKind.IMAGE_SEG or clip.length < 2:
        raise ContractError(f"temporal augmentation needs at least 2 frames, clip has {clip.length}")
    if ops.is_identity:
        return clip.with_planes(**{name: plane.copy() for name, plane in clip.planes().items()})

    indices = frame_indices(clip.length, ops, np.random.default_rng(seed))
    logger.debug("temporal_augmented", source=clip.length, output=len(indices), reverse=ops.reverse,
                 speed=ops.speed)
    return clip.with_planes(**{name: plane[indices].copy() for name, plane in clip.planes().items()})
