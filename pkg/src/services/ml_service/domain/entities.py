"""
ML service domain entities: loss and metric reports, stage schedules, the
optimizer state and training run configuration.
"""
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import Field, ValidationError, field_validator, model_validator

from src.shared.domain.base import ArrayEntity, ValueObject
from src.shared.domain.exceptions import ConfigError

MATTING_LOSS_WEIGHTS: Dict[str, float] = {
    "l1_alpha": 1.0,
    "lap_alpha": 1.0,
    "tc_alpha": 5.0,
    "l1_fg": 1.0,
    "tc_fg": 5.0,
}

PARAMETER_GROUPS = ("backbone", "decoder", "dgf")


class LossReport(ValueObject):
    """Scalar loss components of one pass."""
    l1_alpha: float = 0.0
    lap_alpha: float = 0.0
    tc_alpha: float = 0.0
    l1_fg: float = 0.0
    tc_fg: float = 0.0
    total_matting: float = 0.0
    seg_bce: Optional[float] = None

    @classmethod
    def from_components(cls, components: Dict[str, float], seg_bce: Optional[float] = None) -> "LossReport":
        values = {name: float(components.get(name, 0.0)) for name in MATTING_LOSS_WEIGHTS}
        total = sum(MATTING_LOSS_WEIGHTS[name] * value for name, value in values.items())
        return cls(total_matting=total, seg_bce=seg_bce, **values)

    def as_dict(self) -> Dict[str, float]:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class MetricName(str, Enum):
    """Evaluation metrics; conn is optional because it is costly at high resolution."""
    MAD = "mad"
    MSE = "mse"
    GRAD = "grad"
    CONN = "conn"
    DTSSD = "dtssd"
    FG_MSE = "fg_mse"
    MIOU = "miou"


DEFAULT_METRICS = (MetricName.MAD, MetricName.MSE, MetricName.GRAD, MetricName.CONN, MetricName.DTSSD)


class MetricReport(ValueObject):
    """
    Metrics of one clip.

    MAD, MSE, Grad, Conn and foreground MSE are scaled by 1e3, dtSSD by
    1e2; mIOU is unscaled.
    """
    clip_id: str
    frames: int = 0
    mad: Optional[float] = None
    mse: Optional[float] = None
    grad: Optional[float] = None
    conn: Optional[float] = None
    dtssd: Optional[float] = None
    fg_mse: Optional[float] = None
    miou: Optional[float] = None
    scaled: bool = True

    def values(self) -> Dict[str, float]:
        return {m.value: getattr(self, m.value) for m in MetricName if getattr(self, m.value) is not None}

    def records(self) -> List[Dict[str, Any]]:
        """One line-oriented record per metric."""
        return [{"clip": self.clip_id, "metric": name, "value": value} for name, value in self.values().items()]

    @classmethod
    def aggregate(cls, reports: List["MetricReport"], clip_id: str = "aggregate") -> "MetricReport":
        """Frame-weighted mean of every metric present in all reports."""
        if not reports:
            return cls(clip_id=clip_id)
        weights = np.array([max(r.frames, 1) for r in reports], dtype=np.float64)
        merged: Dict[str, float] = {}
        for metric in MetricName:
            values = [getattr(r, metric.value) for r in reports]
            if all(v is not None for v in values):
                merged[metric.value] = float(np.average(values, weights=weights))
        return cls(clip_id=clip_id, frames=int(weights.sum()), **merged)


class PassKind(str, Enum):
    """Kinds of training pass in one iteration."""
    MATTING = "matting"
    MATTING_HR = "matting_hr"
    VIDEO_SEG = "video_seg"
    IMAGE_SEG = "image_seg"


class TrainingProfile(str, Enum):
    DESK = "desk"
    FULL = "full"


class LearningRates(ValueObject):
    """Per-group Adam learning rates."""
    backbone: float = Field(gt=0)
    decoder: float = Field(gt=0)
    dgf: float = Field(gt=0)

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in PARAMETER_GROUPS}


# stage -> (backbone, decoder, dgf)
STAGE_LEARNING_RATES: Dict[int, Tuple[float, float, float]] = {
    1: (1e-4, 2e-4, 2e-4),
    2: (5e-5, 1e-4, 1e-4),
    3: (1e-5, 1e-5, 2e-4),
    4: (1e-5, 5e-5, 2e-4),
}

# stage -> (T, T_hr, epochs)
FULL_STAGE_LENGTHS: Dict[int, Tuple[int, int, int]] = {
    1: (15, 0, 15),
    2: (50, 0, 2),
    3: (40, 6, 1),
    4: (40, 6, 5),
}


class StageConfig(ValueObject):
    """One stage of the four-stage schedule."""
    stage: int = Field(ge=1, le=4)
    seq_length: int = Field(ge=1)
    hr_seq_length: int = Field(default=0, ge=0)
    lr_resolution: Tuple[int, int] = (256, 512)
    hr_resolution: Tuple[int, int] = (1024, 2048)
    downsample: float = Field(default=0.25, gt=0.0, le=1.0)
    learning_rates: LearningRates
    epochs: int = Field(default=1, ge=1)
    iterations_per_epoch: int = Field(default=1, ge=1)
    batch_size: int = Field(default=1, ge=1)

    @field_validator("lr_resolution", "hr_resolution")
    @classmethod
    def _check_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if low > high or low < 32 or low % 16 or high % 16:
            raise ValueError(f"resolution range {value} must be ordered multiples of 16, at least 32")
        return value

    @model_validator(mode="after")
    def _check_high_resolution(self) -> "StageConfig":
        if self.has_high_resolution_pass:
            if self.hr_seq_length < 1:
                raise ValueError(f"stage {self.stage} needs a high-resolution sequence length")
            if self.downsample >= 1.0:
                raise ValueError("high-resolution passes need a downsample factor below 1")
        return self

    @property
    def has_high_resolution_pass(self) -> bool:
        return self.stage >= 3

    @property
    def image_batch_size(self) -> int:
        """B' = B·T for single-frame segmentation samples."""
        return self.batch_size * self.seq_length

    @property
    def iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch

    @classmethod
    def full(cls, stage: int) -> "StageConfig":
        length, hr_length, epochs = FULL_STAGE_LENGTHS[stage]
        backbone, decoder, dgf = STAGE_LEARNING_RATES[stage]
        return cls(
            stage=stage,
            seq_length=length,
            hr_seq_length=hr_length,
            lr_resolution=(256, 512),
            hr_resolution=(1024, 2048),
            downsample=0.25,
            learning_rates=LearningRates(backbone=backbone, decoder=decoder, dgf=dgf),
            epochs=epochs,
            iterations_per_epoch=500,
            batch_size=4,
        )

    @classmethod
    def desk(cls, stage: int, iterations: int = 4) -> "StageConfig":
        backbone, decoder, dgf = STAGE_LEARNING_RATES[stage]
        return cls(
            stage=stage,
            seq_length=4,
            hr_seq_length=2 if stage >= 3 else 0,
            lr_resolution=(64, 64),
            hr_resolution=(128, 128),
            downsample=0.25,
            learning_rates=LearningRates(backbone=backbone, decoder=decoder, dgf=dgf),
            epochs=1,
            iterations_per_epoch=iterations,
            batch_size=1,
        )

    @classmethod
    def for_profile(cls, profile: "TrainingProfile", stage: int, iterations: Optional[int] = None) -> "StageConfig":
        if profile is TrainingProfile.FULL:
            config = cls.full(stage)
            if iterations is not None:
                config = config.model_copy(update={"iterations_per_epoch": iterations})
            return config
        return cls.desk(stage, iterations or 4)


class AdamState(ArrayEntity):
    """Per-parameter moments and step counts; ``step`` counts optimizer calls."""
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: Dict[str, np.ndarray] = Field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = Field(default_factory=dict)
    steps: Dict[str, int] = Field(default_factory=dict)


class StageCursor(ValueObject):
    """Where a training run stands: the stage and the next iteration to run."""
    stage: int = Field(default=1, ge=1, le=4)
    iteration: int = Field(default=0, ge=0)
    completed_stages: Tuple[int, ...] = ()


class TrainingRunConfig(ValueObject):
    """
    Training run configuration, loaded from a JSON file.

    The schema is documented in docs/config_schema.md.
    """
    profile: TrainingProfile = TrainingProfile.DESK
    stages: Tuple[int, ...] = (1,)
    seed: int = 0
    model: Dict[str, Any] = Field(default_factory=lambda: {"preset": "tiny_test"})
    iterations_per_stage: Optional[int] = Field(default=None, ge=1)
    segmentation: bool = True
    allow_out_of_order: bool = False
    checkpoint_every: int = Field(default=0, ge=0)
    memory_budget_bytes: int = Field(default=4 * 1024 ** 3, gt=0)
    output_dir: Path = Path("runs/train")
    stage_overrides: Dict[int, Dict[str, Any]] = Field(default_factory=dict)

    @field_validator("stages")
    @classmethod
    def _check_stages(cls, stages: Tuple[int, ...]) -> Tuple[int, ...]:
        if not stages or any(s not in (1, 2, 3, 4) for s in stages):
            raise ValueError(f"stages must be drawn from 1..4, got {stages}")
        if len(set(stages)) != len(stages):
            raise ValueError(f"stages repeat: {stages}")
        return stages

    @model_validator(mode="after")
    def _check_order(self) -> "TrainingRunConfig":
        if not self.allow_out_of_order and list(self.stages) != sorted(self.stages):
            raise ValueError(f"stages must run in order 1→4, got {self.stages}")
        return self

    def stage_config(self, stage: int) -> StageConfig:
        config = StageConfig.for_profile(self.profile, stage, self.iterations_per_stage)
        overrides = self.stage_overrides.get(stage)
        if overrides:
            try:
                config = StageConfig.model_validate({**config.model_dump(), **overrides})
            except ValidationError as exc:
                raise ConfigError(f"stage {stage} override: {exc}") from exc
        return config

    @classmethod
    def from_json(cls, text: str) -> "TrainingRunConfig":
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: Path) -> "TrainingRunConfig":
        try:
            return cls.from_json(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"training config not found: {path}") from exc

    @classmethod
    def parse(cls, payload: Dict[str, Any]) -> "TrainingRunConfig":
        try:
            return cls.model_validate(payload)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc


class TrainingLogRecord(ValueObject):
    """One line of the training log."""
    stage: int
    iteration: int
    pass_kind: PassKind
    losses: Dict[str, float]
    learning_rates: Dict[str, float]
    resolution: Tuple[int, int]
    frames: int

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)
