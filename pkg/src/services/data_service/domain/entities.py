"""
Data service domain entities: clip samples and augmentation configurations.
"""
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import Field, ValidationError, field_validator, model_validator

from src.shared.domain.base import ArrayEntity, ValueObject
from src.shared.domain.exceptions import AugmentationConfigError, ShapeError


class ClipKind(str, Enum):
    """What a clip is used to supervise."""
    MATTING = "matting"
    VIDEO_SEG = "video_seg"
    IMAGE_SEG = "image_seg"


class Interpolation(str, Enum):
    """Warp interpolation; nearest keeps pixel values bit-exact."""
    BILINEAR = "bilinear"
    NEAREST = "nearest"


class Easing(str, Enum):
    """Easing curves mapping [0, 1] onto [0, 1] with fixed endpoints."""
    LINEAR = "linear"
    EASE_IN_QUAD = "ease_in_quad"
    EASE_OUT_QUAD = "ease_out_quad"
    SINE = "sine"

    def apply(self, u: float) -> float:
        u = min(max(float(u), 0.0), 1.0)
        if self is Easing.LINEAR:
            return u
        if self is Easing.EASE_IN_QUAD:
            return u * u
        if self is Easing.EASE_OUT_QUAD:
            return 1.0 - (1.0 - u) * (1.0 - u)
        # endpoints pinned so cos rounding cannot leak into f(0) or f(1)
        if u in (0.0, 1.0):
            return u
        return 0.5 - 0.5 * float(np.cos(np.pi * u))


class ClipSample(ArrayEntity):
    """
    One training or evaluation clip.

    Arrays are float32 in T×C×H×W layout. Matting clips carry alpha,
    foreground and background planes with frames = α·F + (1−α)·B;
    segmentation clips carry a binary mask.
    """
    frames: np.ndarray
    kind: ClipKind = ClipKind.MATTING
    alpha_gt: Optional[np.ndarray] = None
    fg_gt: Optional[np.ndarray] = None
    bg: Optional[np.ndarray] = None
    seg_gt: Optional[np.ndarray] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_planes(self) -> "ClipSample":
        frames = self.frames
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError("frames must be T×3×H×W", frames.shape)
        t, _, h, w = frames.shape
        expected = {"alpha_gt": 1, "fg_gt": 3, "bg": 3, "seg_gt": 1}
        for name, channels in expected.items():
            plane = getattr(self, name)
            if plane is not None and plane.shape != (t, channels, h, w):
                raise ShapeError(f"{name} does not match the frames", plane.shape, (t, channels, h, w))
        if self.kind is ClipKind.MATTING and (self.alpha_gt is None or self.fg_gt is None):
            raise ShapeError("matting clips need alpha and foreground planes", frames.shape)
        if self.kind is not ClipKind.MATTING and self.seg_gt is None:
            raise ShapeError("segmentation clips need a mask plane", frames.shape)
        if self.kind is ClipKind.IMAGE_SEG and t != 1:
            raise ShapeError("image segmentation samples hold exactly one frame", frames.shape)
        return self

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def extent(self) -> Tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def planes(self) -> Dict[str, np.ndarray]:
        """Every populated array field by name."""
        names = ("frames", "alpha_gt", "fg_gt", "bg", "seg_gt")
        return {name: getattr(self, name) for name in names if getattr(self, name) is not None}

    def with_planes(self, **planes: np.ndarray) -> "ClipSample":
        """Copy of the sample with some planes replaced (re-validated)."""
        data = {**self.planes(), **planes}
        return ClipSample(kind=self.kind, seed=self.seed, **data)

    def reconstruction_error(self) -> float:
        """Max |I − (αF + (1−α)B)|; zero for non-matting clips or missing background."""
        if self.kind is not ClipKind.MATTING or self.bg is None:
            return 0.0
        rebuilt = self.alpha_gt * self.fg_gt + (1.0 - self.alpha_gt) * self.bg
        return float(np.max(np.abs(self.frames - rebuilt)))


class PropertyRamp(ValueObject):
    """Start and end value of one augmented property plus its easing curve."""
    start: float = 0.0
    end: float = 0.0
    easing: Easing = Easing.LINEAR

    @classmethod
    def constant(cls, value: float) -> "PropertyRamp":
        return cls(start=value, end=value)

    def value_at(self, u: float) -> float:
        return self.start + (self.end - self.start) * self.easing.apply(u)

    @property
    def is_constant(self) -> bool:
        return self.start == self.end


class TemporalAugmentConfig(ValueObject):
    """Clip-level frame reordering: reversal, speed change, pausing and frame skipping."""
    reverse: bool = False
    speed: float = Field(default=1.0, gt=0.0)
    pause_at: Optional[int] = Field(default=None, ge=0)
    pause_length: int = Field(default=0, ge=0)
    skip_every: Optional[int] = Field(default=None, ge=2)
    length: Optional[int] = Field(default=None, ge=1)

    @property
    def is_identity(self) -> bool:
        return (not self.reverse and self.speed == 1.0 and self.pause_length == 0
                and self.skip_every is None and self.length is None)

    @classmethod
    def sample(cls, rng: np.random.Generator, length: int) -> "TemporalAugmentConfig":
        """Random training profile; output length is pinned to ``length``."""
        return cls(
            reverse=bool(rng.random() < 0.5),
            speed=float(rng.choice([0.5, 1.0, 1.0, 1.5, 2.0])),
            pause_at=int(rng.integers(0, length)) if rng.random() < 0.2 else None,
            pause_length=int(rng.integers(1, 4)) if rng.random() < 0.2 else 0,
            skip_every=int(rng.integers(3, 6)) if rng.random() < 0.1 else None,
            length=length,
        )


_NEUTRAL = {
    "translate_x": 0.0,
    "translate_y": 0.0,
    "scale": 1.0,
    "rotate": 0.0,
    "shear": 0.0,
    "brightness": 0.0,
    "saturation": 1.0,
    "contrast": 1.0,
    "hue": 0.0,
    "noise": 0.0,
    "blur": 0.0,
}

AFFINE_PROPERTIES = ("translate_x", "translate_y", "scale", "rotate", "shear")
APPEARANCE_PROPERTIES = ("brightness", "saturation", "contrast", "hue", "noise", "blur")


class MotionAugmentConfig(ValueObject):
    """
    Continuous per-frame motion and appearance changes.

    Translations are in pixels, rotation and shear in degrees, hue in
    fractions of a full turn, noise as a standard deviation and blur as a
    Gaussian sigma. Discrete flags apply to every frame of the clip.
    """
    translate_x: PropertyRamp = PropertyRamp.constant(0.0)
    translate_y: PropertyRamp = PropertyRamp.constant(0.0)
    scale: PropertyRamp = PropertyRamp.constant(1.0)
    rotate: PropertyRamp = PropertyRamp.constant(0.0)
    shear: PropertyRamp = PropertyRamp.constant(0.0)
    brightness: PropertyRamp = PropertyRamp.constant(0.0)
    saturation: PropertyRamp = PropertyRamp.constant(1.0)
    contrast: PropertyRamp = PropertyRamp.constant(1.0)
    hue: PropertyRamp = PropertyRamp.constant(0.0)
    noise: PropertyRamp = PropertyRamp.constant(0.0)
    blur: PropertyRamp = PropertyRamp.constant(0.0)

    hflip: bool = False
    grayscale: bool = False
    sharpen: bool = False

    temporal: TemporalAugmentConfig = TemporalAugmentConfig()

    @field_validator("noise", "blur")
    @classmethod
    def _non_negative(cls, ramp: PropertyRamp) -> PropertyRamp:
        if ramp.start < 0 or ramp.end < 0:
            raise ValueError("noise and blur must be non-negative")
        return ramp

    @field_validator("shear")
    @classmethod
    def _bounded_shear(cls, ramp: PropertyRamp) -> PropertyRamp:
        if abs(ramp.start) >= 80 or abs(ramp.end) >= 80:
            raise ValueError("shear must stay within ±80 degrees")
        return ramp

    @classmethod
    def identity(cls) -> "MotionAugmentConfig":
        return cls()

    @classmethod
    def parse(cls, payload: dict) -> "MotionAugmentConfig":
        try:
            return cls.model_validate(payload)
        except ValidationError as exc:
            raise AugmentationConfigError(str(exc)) from exc

    def is_neutral(self, name: str) -> bool:
        ramp: PropertyRamp = getattr(self, name)
        return ramp.start == _NEUTRAL[name] and ramp.end == _NEUTRAL[name]

    @property
    def has_affine(self) -> bool:
        return not all(self.is_neutral(name) for name in AFFINE_PROPERTIES)

    @property
    def has_appearance(self) -> bool:
        return not all(self.is_neutral(name) for name in APPEARANCE_PROPERTIES)

    @classmethod
    def sample(
        cls,
        rng: np.random.Generator,
        height: int,
        width: int,
        strength: float = 1.0,
        affine_only: bool = False,
    ) -> "MotionAugmentConfig":
        """
        Draw a random configuration.

        Args:
            rng: generator the draws come from
            height: frame height, scales translation ranges
            width: frame width, scales translation ranges
            strength: multiplier on every range (testing samples use 0.5)
            affine_only: leave appearance and discrete flags neutral

        Returns:
            MotionAugmentConfig
        """
        easings = list(Easing)

        def ramp(neutral: float, spread: float) -> PropertyRamp:
            spread *= strength
            return PropertyRamp(
                start=float(neutral + rng.uniform(-spread, spread)),
                end=float(neutral + rng.uniform(-spread, spread)),
                easing=easings[int(rng.integers(len(easings)))],
            )

        values = {
            "translate_x": ramp(0.0, 0.1 * width),
            "translate_y": ramp(0.0, 0.1 * height),
            "scale": ramp(1.0, 0.2),
            "rotate": ramp(0.0, 10.0),
            "shear": ramp(0.0, 5.0),
        }
        if affine_only:
            return cls(**values)

        noise = 0.02 * strength * float(rng.random())
        blur = 1.0 * strength * float(rng.random()) if rng.random() < 0.3 else 0.0
        values.update(
            brightness=ramp(0.0, 0.1),
            saturation=ramp(1.0, 0.3),
            contrast=ramp(1.0, 0.2),
            hue=ramp(0.0, 0.05),
            noise=PropertyRamp(start=noise, end=noise),
            blur=PropertyRamp(start=blur, end=blur),
            hflip=bool(rng.random() < 0.5),
            grayscale=bool(rng.random() < 0.05),
            sharpen=bool(rng.random() < 0.05),
        )
        return cls(**values)
