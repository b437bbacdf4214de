"""
Alpha compositing: I = α·F + (1−α)·B.
"""
from typing import Union

import numpy as np
import structlog

from src.shared.domain.exceptions import ShapeError
from src.shared.tensor import Tensor
from src.shared.tensor import functional as F

logger = structlog.get_logger(__name__)

Plane = Union[np.ndarray, Tensor]


def _clamped(name: str, plane: np.ndarray) -> np.ndarray:
    low, high = float(plane.min()), float(plane.max())
    if low < 0.0 or high > 1.0:
        logger.warning("composite_input_clamped", plane=name, min=low, max=high)
        return np.clip(plane, 0.0, 1.0)
    return plane


def _check_extents(fg_shape, alpha_shape, bg_shape) -> None:
    if tuple(fg_shape) != tuple(bg_shape):
        raise ShapeError("foreground and background extents differ", fg_shape, bg_shape)
    if len(alpha_shape) != len(fg_shape) or alpha_shape[-2:] != fg_shape[-2:]:
        raise ShapeError("alpha extents differ from the foreground", alpha_shape, fg_shape)
    channel_axis = len(fg_shape) - 3
    if channel_axis >= 0 and alpha_shape[channel_axis] not in (1, fg_shape[channel_axis]):
        raise ShapeError("alpha must have one channel or as many as the foreground", alpha_shape, fg_shape)


def composite(fg: Plane, alpha: Plane, bg: Plane) -> Plane:
    """
    Composite a foreground over a background.

    Values outside [0, 1] are clamped with a warning. Tensor inputs go
    through the differentiable ops and return a Tensor; numpy inputs return
    a numpy array of the foreground's dtype.

    Args:
        fg: ...×C×H×W foreground colors
        alpha: ...×1×H×W (or ...×C×H×W) opacity
        bg: ...×C×H×W background colors

    Returns:
        Composited frames with the foreground's shape
    """
    _check_extents(fg.shape, alpha.shape, bg.shape)

    if any(isinstance(p, Tensor) for p in (fg, alpha, bg)):
        planes = {}
        for name, plane in (("fg", fg), ("alpha", alpha), ("bg", bg)):
            plane = plane if isinstance(plane, Tensor) else Tensor(plane)
            low, high = float(plane.data.min()), float(plane.data.max())
            if low < 0.0 or high > 1.0:
                logger.warning("composite_input_clamped", plane=name, min=low, max=high)
                plane = F.clamp(plane, 0.0, 1.0)
            planes[name] = plane
        a = planes["alpha"]
        return a * planes["fg"] + (1.0 - a) * planes["bg"]

    fg = _clamped("fg", np.asarray(fg))
    alpha = _clamped("alpha", np.asarray(alpha))
    bg = _clamped("bg", np.asarray(bg))
    out = alpha * fg + (1.0 - alpha) * bg
    return out.astype(fg.dtype, copy=False)
