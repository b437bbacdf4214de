"""
Augmentation engine built from configurable per-frame steps.

Affine steps warp geometry (and the labels with it); appearance steps change
pixel colors; discrete steps apply one fixed change to every frame.
"""
import time
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import structlog
from scipy import ndimage

from src.shared.domain.exceptions import AugmentationConfigError

from ..domain.entities import (
    ClipKind,
    ClipSample,
    Interpolation,
    MotionAugmentConfig,
    PropertyRamp,
)

logger = structlog.get_logger(__name__)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
MIN_AFFINE_DET = 1e-6

_RGB_TO_YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=np.float64
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def luminance(image: np.ndarray) -> np.ndarray:
    """1×H×W luma of a 3×H×W image."""
    return np.tensordot(LUMA, image, axes=(0, 0))[None].astype(image.dtype)


class AugmentationStep(ABC):
    """Abstract base class for augmentation steps."""

    # geometric steps also transform alpha and segmentation planes
    geometric = False

    def __init__(self, step_id: str, parameters: Dict[str, Any] = None):
        self.step_id = step_id
        self.parameters = parameters or {}
        self.execution_time: float = 0.0
        self.frames_processed = 0

    @abstractmethod
    def validate_parameters(self) -> Tuple[bool, Optional[str]]:
        """Validate step parameters."""

    @abstractmethod
    def transform(self, image: np.ndarray, u: float, rng: np.random.Generator) -> np.ndarray:
        """Transform one C×H×W image at clip position ``u`` in [0, 1]."""

    def is_noop(self) -> bool:
        return False

    def apply(self, image: np.ndarray, u: float, rng: np.random.Generator) -> np.ndarray:
        started = time.perf_counter()
        result = image if self.is_noop() else self.transform(image, u, rng)
        self.execution_time += time.perf_counter() - started
        self.frames_processed += 1
        return result

    def get_summary(self) -> Dict[str, Any]:
        """Get augmentation step summary."""
        return {
            "step_id": self.step_id,
            "parameters": {k: v.model_dump() if hasattr(v, "model_dump") else v for k, v in self.parameters.items()},
            "execution_time": self.execution_time,
            "frames_processed": self.frames_processed,
        }


class RampStep(AugmentationStep):
    """Step driven by one eased start/end ramp."""

    neutral = 0.0

    def __init__(self, step_id: str, ramp: PropertyRamp):
        super().__init__(step_id, {"ramp": ramp})

    @property
    def ramp(self) -> PropertyRamp:
        return self.parameters["ramp"]

    def validate_parameters(self) -> Tuple[bool, Optional[str]]:
        if not isinstance(self.ramp, PropertyRamp):
            return False, f"{self.step_id} needs a PropertyRamp"
        return True, None

    def is_noop(self) -> bool:
        return self.ramp.start == self.neutral and self.ramp.end == self.neutral


class AffineSteps:
    """Geometric warps."""

    class Warp(AugmentationStep):
        """Translation, scale, rotation and shear about the frame center."""

        geometric = True

        def __init__(self, config: MotionAugmentConfig, interpolation: Interpolation = Interpolation.BILINEAR):
            super().__init__("affine_warp", {"config": config, "interpolation": interpolation.value})
            self.config = config
            self.order = 0 if interpolation is Interpolation.NEAREST else 1

        def linear_part(self, u: float) -> np.ndarray:
            """2×2 matrix acting on (row, col) coordinates."""
            cfg = self.config
            theta = np.deg2rad(cfg.rotate.value_at(u))
            shear = np.deg2rad(cfg.shear.value_at(u))
            rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            shearing = np.array([[1.0, 0.0], [np.tan(shear), 1.0]])
            return cfg.scale.value_at(u) * rotation @ shearing

        def validate_parameters(self) -> Tuple[bool, Optional[str]]:
            # det = scale², so checking both scale endpoints and the eased path suffices
            for u in np.linspace(0.0, 1.0, 33):
                det = float(np.linalg.det(self.linear_part(u)))
                if abs(det) < MIN_AFFINE_DET:
                    return False, f"affine transform is degenerate at u={u:.3f} (|det|={abs(det):.2e})"
            return True, None

        def is_noop(self) -> bool:
            return not self.config.has_affine

        def warp(self, image: np.ndarray, u: float, fill: str) -> np.ndarray:
            """Warp every channel; ``fill`` is "zero" or "edge" for pixels mapped from outside."""
            if self.is_noop():
                return image
            height, width = image.shape[-2:]
            forward = self.linear_part(u)
            if abs(np.linalg.det(forward)) < MIN_AFFINE_DET:
                raise AugmentationConfigError(f"affine transform is degenerate at u={u:.3f}")
            inverse = np.linalg.inv(forward)
            center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
            shift = np.array([self.config.translate_y.value_at(u), self.config.translate_x.value_at(u)])
            offset = center - inverse @ (center + shift)
            mode = "constant" if fill == "zero" else "nearest"
            out = np.empty_like(image)
            for c in range(image.shape[0]):
                out[c] = ndimage.affine_transform(
                    image[c], inverse, offset=offset, order=self.order, mode=mode, cval=0.0, prefilter=False
                )
            return out

        def transform(self, image: np.ndarray, u: float, rng: np.random.Generator) -> np.ndarray:
            return self.warp(image, u, "edge")


class AppearanceSteps:
    """Pixel-value changes on color planes."""

    class Brightness(RampStep):
        def __init__(self, ramp: PropertyRamp):
            super().__init__("brightness", ramp)

        def transform(self, image, u, rng):
            return image + np.float32(self.ramp.value_at(u))

    class Contrast(RampStep):
        neutral = 1.0

        def __init__(self, ramp: PropertyRamp):
            super().__init__("contrast", ramp)

        def transform(self, image, u, rng):
            mean = image.mean(dtype=np.float64)
            return ((image - mean) * self.ramp.value_at(u) + mean).astype(image.dtype)

    class Saturation(RampStep):
        neutral = 1.0

        def __init__(self, ramp: PropertyRamp):
            super().__init__("saturation", ramp)

        def transform(self, image, u, rng):
            gray = luminance(image)
            return (gray + (image - gray) * self.ramp.value_at(u)).astype(image.dtype)

    class Hue(RampStep):
        """Rotates chroma in YIQ space by a fraction of a full turn."""

        def __init__(self, ramp: PropertyRamp):
            super().__init__("hue", ramp)

        def transform(self, image, u, rng):
            angle = 2.0 * np.pi * self.ramp.value_at(u)
            rotate = np.array(
                [[1.0, 0.0, 0.0], [0.0, np.cos(angle), -np.sin(angle)], [0.0, np.sin(angle), np.cos(angle)]]
            )
            matrix = _YIQ_TO_RGB @ rotate @ _RGB_TO_YIQ
            return np.tensordot(matrix, image, axes=(1, 0)).astype(image.dtype)

    class Noise(RampStep):
        def __init__(self, ramp: PropertyRamp):
            super().__init__("noise", ramp)

        def transform(self, image, u, rng):
            std = self.ramp.value_at(u)
            if std <= 0:
                return image
            return image + rng.normal(0.0, std, size=image.shape).astype(image.dtype)

    class Blur(RampStep):
        def __init__(self, ramp: PropertyRamp):
            super().__init__("blur", ramp)

        def transform(self, image, u, rng):
            sigma = self.ramp.value_at(u)
            if sigma <= 0:
                return image
            return ndimage.gaussian_filter(image, sigma=(0.0, sigma, sigma), mode="reflect")


class DiscreteSteps:
    """Fixed changes applied identically to every frame."""

    class HorizontalFlip(AugmentationStep):
        geometric = True

        def __init__(self):
            super().__init__("hflip")

        def validate_parameters(self):
            return True, None

        def transform(self, image, u, rng):
            return np.ascontiguousarray(image[..., ::-1])

    class Grayscale(AugmentationStep):
        def __init__(self):
            super().__init__("grayscale")

        def validate_parameters(self):
            return True, None

        def transform(self, image, u, rng):
            return np.repeat(luminance(image), image.shape[0], axis=0)

    class Sharpen(AugmentationStep):
        """Unsharp mask with a fixed sigma of 1 px and amount 1."""

        def __init__(self, amount: float = 1.0, sigma: float = 1.0):
            super().__init__("sharpen", {"amount": amount, "sigma": sigma})

        def validate_parameters(self):
            if self.parameters["amount"] < 0 or self.parameters["sigma"] <= 0:
                return False, "sharpen amount must be >= 0 and sigma > 0"
            return True, None

        def transform(self, image, u, rng):
            sigma = self.parameters["sigma"]
            blurred = ndimage.gaussian_filter(image, sigma=(0.0, sigma, sigma), mode="reflect")
            return (image + self.parameters["amount"] * (image - blurred)).astype(image.dtype)


def build_appearance_steps(config: MotionAugmentConfig) -> List[AugmentationStep]:
    """Appearance steps in application order; neutral ramps are left out."""
    steps: List[AugmentationStep] = [
        AppearanceSteps.Brightness(config.brightness),
        AppearanceSteps.Contrast(config.contrast),
        AppearanceSteps.Saturation(config.saturation),
        AppearanceSteps.Hue(config.hue),
        AppearanceSteps.Blur(config.blur),
        AppearanceSteps.Noise(config.noise),
    ]
    return [step for step in steps if not step.is_noop()]


def build_discrete_steps(config: MotionAugmentConfig) -> List[AugmentationStep]:
    steps: List[AugmentationStep] = []
    if config.grayscale:
        steps.append(DiscreteSteps.Grayscale())
    if config.sharpen:
        steps.append(DiscreteSteps.Sharpen())
    if config.hflip:
        steps.append(DiscreteSteps.HorizontalFlip())
    return steps


def _validated(steps: List[AugmentationStep]) -> List[AugmentationStep]:
    for step in steps:
        valid, message = step.validate_parameters()
        if not valid:
            raise AugmentationConfigError(f"{step.step_id}: {message}")
    return steps


def _color_pipeline(image, u, rng, steps: List[AugmentationStep]) -> np.ndarray:
    for step in steps:
        image = step.apply(image, u, rng)
    return image


def _geometry_pipeline(image, u, rng, steps: List[AugmentationStep]) -> np.ndarray:
    for step in steps:
        if step.geometric:
            image = step.apply(image, u, rng)
    return image


def motion_augment(
    clip: ClipSample,
    config: MotionAugmentConfig,
    seed: int,
    background_config: Optional[MotionAugmentConfig] = None,
    interpolation: Interpolation = Interpolation.BILINEAR,
) -> ClipSample:
    """
    Apply eased motion, appearance and discrete augmentation to a clip.

    For frame t the clip position is u = t/(T−1); every ramp evaluates its
    easing at u. The foreground, alpha and segmentation planes follow
    ``config``'s affine motion; a matting background follows
    ``background_config``'s motion (static when omitted). Appearance steps
    change foreground and background identically before the frame is
    re-composited, so I = α·F + (1−α)·B keeps holding.

    Args:
        clip: input sample
        config: foreground motion, appearance and discrete flags
        seed: seeds the noise step
        background_config: independent background motion
        interpolation: bilinear for training, nearest for bit-exact checks

    Returns:
        Augmented ClipSample
    """
    fg_warp = AffineSteps.Warp(config, interpolation)
    bg_warp = AffineSteps.Warp(background_config or MotionAugmentConfig.identity(), interpolation)
    appearance = _validated(build_appearance_steps(config))
    discrete = _validated(build_discrete_steps(config))
    _validated([fg_warp, bg_warp])

    if fg_warp.is_noop() and bg_warp.is_noop() and not appearance and not discrete:
        return clip.with_planes(**{name: plane.copy() for name, plane in clip.planes().items()})

    rng = np.random.default_rng(seed)
    length = clip.length
    planes = {name: np.empty_like(plane) for name, plane in clip.planes().items()}

    for t in range(length):
        u = t / (length - 1) if length > 1 else 0.0
        if clip.kind is ClipKind.MATTING:
            alpha = fg_warp.warp(clip.alpha_gt[t], u, "zero")
            fg = fg_warp.warp(clip.fg_gt[t], u, "zero")
            bg = bg_warp.warp(clip.bg[t], u, "edge") if clip.bg is not None else None

            fg = np.clip(_color_pipeline(fg, u, rng, appearance + discrete), 0.0, 1.0)
            alpha = np.clip(_geometry_pipeline(alpha, u, rng, discrete), 0.0, 1.0)
            planes["alpha_gt"][t] = alpha
            planes["fg_gt"][t] = fg
            if bg is not None:
                bg = np.clip(_color_pipeline(bg, u, rng, appearance + discrete), 0.0, 1.0)
                planes["bg"][t] = bg
                planes["frames"][t] = alpha * fg + (1.0 - alpha) * bg
            else:
                frame = fg_warp.warp(clip.frames[t], u, "edge")
                planes["frames"][t] = np.clip(_color_pipeline(frame, u, rng, appearance + discrete), 0.0, 1.0)
            if clip.seg_gt is not None:
                planes["seg_gt"][t] = (alpha > 0.5).astype(alpha.dtype)
        else:
            frame = fg_warp.warp(clip.frames[t], u, "edge")
            planes["frames"][t] = np.clip(_color_pipeline(frame, u, rng, appearance + discrete), 0.0, 1.0)
            mask = _geometry_pipeline(fg_warp.warp(clip.seg_gt[t], u, "zero"), u, rng, discrete)
            planes["seg_gt"][t] = (mask > 0.5).astype(mask.dtype)

    logger.debug(
        "motion_augmented",
        frames=length,
        steps=[s.step_id for s in [fg_warp] + appearance + discrete if not s.is_noop()],
        interpolation=interpolation.value,
    )
    return clip.with_planes(**planes)
