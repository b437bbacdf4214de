"""
Training checkpoint storage.

A training checkpoint is the model container with the Adam moments added as
``optimizer.*`` tensors and the optimizer settings and stage cursor in the
header, so a run can resume bit-exactly.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import structlog

from src.services.matting_service.domain.entities import ModelConfig
from src.services.matting_service.infrastructure.checkpoint import (
    config_from_header,
    load_into,
    read_container,
    write_container,
)
from src.services.matting_service.infrastructure.network import MattingNetwork, build_model
from src.shared.domain.exceptions import CheckpointConfigMismatchError, CheckpointError, ConfigError

from ..domain.entities import StageCursor
from .optimizer import Adam

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]


class ModelStorage:
    """Manage training checkpoints under one directory."""

    def __init__(self, base_path: PathLike = "runs/checkpoints"):
        self.base_path = Path(base_path)

    def stage_path(self, stage: int) -> Path:
        return self.base_path / f"stage{stage}.ckpt"

    @property
    def latest_path(self) -> Path:
        return self.base_path / "latest.ckpt"

    def save(self, model: MattingNetwork, optimizer: Adam, cursor: StageCursor,
             path: Optional[PathLike] = None, metadata: Optional[Dict[str, Any]] = None) -> Path:
        return save_checkpoint(model, optimizer, cursor, path or self.latest_path, metadata)

    def list_checkpoints(self):
        if not self.base_path.exists():
            return []
        return sorted(self.base_path.glob("*.ckpt"))


def save_checkpoint(
    model: MattingNetwork,
    optimizer: Adam,
    cursor: StageCursor,
    path: PathLike,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write parameters, BN buffers, Adam moments and the stage cursor."""
    tensors = dict(model.state_dict())
    tensors.update(optimizer.state_tensors())
    header = {
        "model_config": model.config.model_dump(mode="json"),
        "metadata": metadata or {},
        "training": {
            "cursor": cursor.model_dump(mode="json"),
            "optimizer": optimizer.state_header(),
        },
    }
    written = write_container(path, tensors, header)
    logger.info("training_checkpoint_written", path=str(written), stage=cursor.stage, iteration=cursor.iteration)
    return written


def load_checkpoint(
    path: PathLike,
    model: Optional[MattingNetwork] = None,
    optimizer: Optional[Adam] = None,
    expected_config: Optional[ModelConfig] = None,
) -> Tuple[MattingNetwork, Optional[Adam], StageCursor]:
    """
    Restore a training checkpoint.

    When ``model`` is given its config must match the stored one; otherwise a
    model is built from the stored config. The optimizer state is restored
    into ``optimizer`` when one is passed.

    Returns:
        (model, optimizer, cursor)
    """
    header, tensors = read_container(path)
    stored = config_from_header(header, path)
    if model is None:
        if expected_config is not None and expected_config != stored:
            raise CheckpointConfigMismatchError(f"{path}: checkpoint config differs from the requested config")
        model = build_model(stored, seed=0)
    load_into(model, path)

    training = header.get("training")
    if training is None:
        raise CheckpointError(f"{path}: not a training checkpoint (no optimizer state)")
    cursor = StageCursor.model_validate(training["cursor"])
    if optimizer is not None:
        try:
            optimizer.load_state(training["optimizer"], tensors)
        except ConfigError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
    logger.info("training_checkpoint_loaded", path=str(path), stage=cursor.stage, iteration=cursor.iteration)
    return model, optimizer, cursor
