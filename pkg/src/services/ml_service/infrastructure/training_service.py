"""
Staged matting and segmentation training.

Every iteration runs a low-resolution matting pass, a high-resolution matting
pass through the guided filter in stages 3 and 4, and a segmentation pass
that alternates between video clips (even iterations) and single images
(odd iterations). Each pass takes its own optimizer step.
"""
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
import structlog

from src.services.data_service.domain.entities import ClipSample
from src.services.data_service.infrastructure.pipeline import ClipProducer, SyntheticClipSource, derive_seed
from src.services.data_service.infrastructure.synthesis import sample_resolution, synth_matting_clip
from src.services.matting_service.domain.entities import ModelConfig
from src.services.matting_service.infrastructure.network import MattingNetwork, build_model, internal_resolution
from src.shared.domain.exceptions import ConfigError, ContractError, DivergenceError
from src.shared.infrastructure.settings import get_settings
from src.shared.tensor import GradTape, Tensor

from ..domain.entities import (
    PassKind,
    StageConfig,
    StageCursor,
    TrainingLogRecord,
    TrainingRunConfig,
)
from .losses import loss_report, matting_loss, segmentation_bce
from .model_storage import ModelStorage, load_checkpoint, save_checkpoint
from .optimizer import Adam

logger = structlog.get_logger(__name__)

BYTES_PER_FLOAT = 4
# recorded intermediates per stored feature map (expansions, BN, activations, tape copies)
ACTIVATION_OVERHEAD = 12
# guide transform maps, upsampled coefficients and their products at full resolution
DGF_FLOATS_PER_PIXEL = 216


def iteration_schedule(stage: int, iteration: int, segmentation: bool = True) -> List[PassKind]:
    """Passes of one iteration in execution order."""
    passes = [PassKind.MATTING]
    if stage >= 3:
        passes.append(PassKind.MATTING_HR)
    if segmentation:
        passes.append(PassKind.VIDEO_SEG if iteration % 2 == 0 else PassKind.IMAGE_SEG)
    return passes


def estimate_activation_bytes(
    config: ModelConfig,
    batch: int,
    frames: int,
    height: int,
    width: int,
    downsample: float = 1.0,
    dgf: bool = False,
) -> int:
    """
    Rough bytes held by one training pass.

    Counts the feature maps the network keeps per pixel of its internal
    resolution, times a fixed overhead for the intermediates the tape stores.
    """
    h, w = internal_resolution(height, width, downsample) if downsample < 1.0 else (height, width)
    e2, e4, e8, e16 = config.encoder_channels
    d16, d8, d4, d2, d1 = config.decoder_channels
    per_pixel = (
        3.0
        + (e2 + d2) / 4.0
        + (e4 + d4) / 16.0
        + (e8 + d8) / 64.0
        + (e16 + config.aspp_channels + d16) / 256.0
        + d1
    ) * ACTIVATION_OVERHEAD
    floats = per_pixel * h * w
    if dgf:
        floats += DGF_FLOATS_PER_PIXEL * height * width
    return int(floats * batch * frames * BYTES_PER_FLOAT)


def stage_memory_estimate(config: ModelConfig, stage: StageConfig) -> int:
    """Largest pass estimate of a stage, at the top of its resolution ranges."""
    top = stage.lr_resolution[1]
    estimates = [
        estimate_activation_bytes(config, stage.batch_size, stage.seq_length, top, top),
        estimate_activation_bytes(config, stage.image_batch_size, 1, top, top),
    ]
    if stage.has_high_resolution_pass:
        hr = stage.hr_resolution[1]
        estimates.append(
            estimate_activation_bytes(config, stage.batch_size, stage.hr_seq_length, hr, hr, stage.downsample, True)
        )
    return max(estimates)


class GradientCoverage:
    """Tracks which parameters received a nonzero gradient."""

    def __init__(self):
        self.covered: Set[str] = set()

    def update(self, model: MattingNetwork) -> None:
        for name, param in model.named_parameters():
            if param.grad is not None and np.any(param.grad != 0):
                self.covered.add(name)

    def missing(self, model: MattingNetwork) -> List[str]:
        return sorted(name for name, _ in model.named_parameters() if name not in self.covered)


class PassBatch(NamedTuple):
    kind: PassKind
    clips: List[ClipSample]

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.clips[0].extent


def _stack(clips: Sequence[ClipSample], plane: str) -> Tensor:
    return Tensor(np.stack([getattr(clip, plane) for clip in clips]))


class TrainingService:
    """Runs the stages of a TrainingRunConfig on one model."""

    def __init__(
        self,
        model: MattingNetwork,
        run_config: TrainingRunConfig,
        source: Optional[SyntheticClipSource] = None,
        storage: Optional[ModelStorage] = None,
        log_path: Optional[Path] = None,
    ):
        self.model = model
        self.run_config = run_config
        self.source = source or SyntheticClipSource(seed=run_config.seed)
        self.storage = storage
        self.log_path = Path(log_path) if log_path else None
        first = run_config.stage_config(run_config.stages[0])
        self.optimizer = Adam.for_model(model, first.learning_rates.as_dict())
        self.cursor = StageCursor(stage=run_config.stages[0])
        self.coverage = GradientCoverage()
        self.records: List[TrainingLogRecord] = []
        self.last_checkpoint: Optional[str] = None

    # Orchestration

    def resume(self, path: Path) -> StageCursor:
        """Restore model, optimizer and cursor from a training checkpoint."""
        _, _, cursor = load_checkpoint(path, self.model, self.optimizer)
        self.cursor = cursor
        self.last_checkpoint = str(path)
        return cursor

    def run(self) -> List[TrainingLogRecord]:
        """Run every configured stage not yet completed, resuming mid-stage from the cursor."""
        for stage in self.run_config.stages:
            if stage in self.cursor.completed_stages:
                continue
            start = self.cursor.iteration if self.cursor.stage == stage else 0
            self.run_stage(self.run_config.stage_config(stage), start_iteration=start)
        return self.records

    def _check_order(self, stage: StageConfig) -> None:
        if self.run_config.allow_out_of_order or stage.stage == 1:
            return
        if stage.stage - 1 not in self.cursor.completed_stages:
            raise ContractError(
                f"stage {stage.stage} needs stage {stage.stage - 1} to have completed; "
                f"completed: {list(self.cursor.completed_stages)}"
            )

    def _check_memory(self, stage: StageConfig) -> None:
        estimate = stage_memory_estimate(self.model.config, stage)
        budget = self.run_config.memory_budget_bytes
        if estimate > budget:
            raise ConfigError(
                f"stage {stage.stage} needs about {estimate / 2 ** 30:.1f} GiB of activations, "
                f"budget is {budget / 2 ** 30:.1f} GiB; lower the batch, sequence length or resolution"
            )

    def run_stage(self, stage: StageConfig, start_iteration: int = 0) -> List[TrainingLogRecord]:
        """
        Run one stage from ``start_iteration``.

        Returns:
            The log records of this call, one per pass
        """
        self._check_order(stage)
        self._check_memory(stage)
        self.optimizer.set_learning_rates(stage.learning_rates.as_dict())
        self.model.train()
        logger.info("stage_started", stage=stage.stage, iterations=stage.iterations, start=start_iteration,
                    **stage.learning_rates.as_dict())

        produced: List[TrainingLogRecord] = []
        producer = ClipProducer(
            lambda i: self.iteration_batches(stage, i),
            count=stage.iterations - start_iteration,
            queue_depth=get_settings().queue_depth,
            start_index=start_iteration,
        )
        with producer:
            for iteration, batches in enumerate(producer, start=start_iteration):
                for batch in batches:
                    produced.append(self._run_pass(batch, stage, iteration))
                self._advance(stage, iteration)

        completed = tuple(sorted(set(self.cursor.completed_stages) | {stage.stage}))
        self.cursor = StageCursor(stage=stage.stage, iteration=stage.iterations, completed_stages=completed)
        if self.storage is not None:
            self._checkpoint(self.storage.stage_path(stage.stage))
            self._checkpoint(self.storage.latest_path)
        logger.info("stage_completed", stage=stage.stage, passes=len(produced))
        return produced

    def _advance(self, stage: StageConfig, iteration: int) -> None:
        self.cursor = self.cursor.model_copy(update={"stage": stage.stage, "iteration": iteration + 1})
        every = self.run_config.checkpoint_every
        if self.storage is not None and every and (iteration + 1) % every == 0:
            self._checkpoint(self.storage.latest_path)

    def _checkpoint(self, path: Path) -> None:
        save_checkpoint(self.model, self.optimizer, self.cursor, path, {"seed": self.run_config.seed})
        self.last_checkpoint = str(path)

    # Passes

    def iteration_batches(self, stage: StageConfig, iteration: int) -> List[PassBatch]:
        """
        Clips for every pass of one iteration.

        Resolutions and clips depend only on (seed, stage, iteration, pass),
        so batches can be produced ahead of training on another thread.
        """
        batches = []
        for kind in iteration_schedule(stage.stage, iteration, self.run_config.segmentation):
            slot = list(PassKind).index(kind)
            rng = np.random.default_rng(derive_seed(self.run_config.seed, stage.stage, iteration, slot))
            key = (stage.stage, iteration, slot)
            if kind is PassKind.MATTING_HR:
                height, width = sample_resolution(rng, *stage.hr_resolution)
                clips = self.source.matting_batch(key, stage.batch_size, stage.hr_seq_length, height, width)
            elif kind is PassKind.MATTING:
                height, width = sample_resolution(rng, *stage.lr_resolution)
                clips = self.source.matting_batch(key, stage.batch_size, stage.seq_length, height, width)
            elif kind is PassKind.VIDEO_SEG:
                height, width = sample_resolution(rng, *stage.lr_resolution)
                clips = self.source.segmentation_batch(key, stage.batch_size, True, stage.seq_length, height, width)
            else:
                height, width = sample_resolution(rng, *stage.lr_resolution)
                clips = self.source.segmentation_batch(key, stage.image_batch_size, False, 1, height, width)
            batches.append(PassBatch(kind, clips))
        return batches

    def _run_pass(self, batch: PassBatch, stage: StageConfig, iteration: int) -> TrainingLogRecord:
        kind, clips = batch.kind, batch.clips
        frames = _stack(clips, "frames")

        if kind in (PassKind.MATTING, PassKind.MATTING_HR):
            high_res = kind is PassKind.MATTING_HR
            alpha_gt, fg_gt = _stack(clips, "alpha_gt"), _stack(clips, "fg_gt")

            def compute():
                output, _ = self.model.forward(
                    frames, downsample=stage.downsample if high_res else 1.0, use_dgf=high_res
                )
                total, components = matting_loss(output.alpha, output.foreground, alpha_gt, fg_gt)
                return total, loss_report(components).as_dict()
        else:
            seg_gt = _stack(clips, "seg_gt")

            def compute():
                output, _ = self.model.forward(frames)
                loss = segmentation_bce(output.segmentation_logits, seg_gt)
                return loss, {"seg_bce": loss.item()}

        losses = self._optimize(compute, kind, stage, iteration)
        record = TrainingLogRecord(
            stage=stage.stage,
            iteration=iteration,
            pass_kind=kind,
            losses=losses,
            learning_rates=dict(self.optimizer.learning_rates),
            resolution=batch.resolution,
            frames=int(frames.shape[0] * frames.shape[1]),
        )
        self._log(record)
        return record

    def _optimize(self, compute: Callable, kind: PassKind, stage: StageConfig, iteration: int) -> Dict[str, float]:
        self.optimizer.zero_grad()
        with GradTape() as tape:
            loss, losses = compute()
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"loss became {value} in stage {stage.stage}, iteration {iteration}, {kind.value} pass",
                    last_good_checkpoint=self.last_checkpoint,
                )
            tape.backward(loss)
        self.coverage.update(self.model)
        self.optimizer.step()
        return losses

    def _log(self, record: TrainingLogRecord) -> None:
        self.records.append(record)
        logger.info("training_pass", stage=record.stage, iteration=record.iteration,
                    pass_kind=record.pass_kind.value, **record.losses)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as handle:
                handle.write(record.to_json() + "\n")


def run_stage(
    model: MattingNetwork,
    stage: StageConfig,
    data: Optional[SyntheticClipSource] = None,
    seed: int = 0,
    segmentation: bool = True,
    allow_out_of_order: bool = True,
) -> List[TrainingLogRecord]:
    """Run a single stage on a fresh optimizer; returns the pass log."""
    run_config = TrainingRunConfig(
        stages=(stage.stage,),
        seed=seed,
        segmentation=segmentation,
        allow_out_of_order=allow_out_of_order,
    )
    service = TrainingService(model, run_config, data or SyntheticClipSource(seed=seed))
    return service.run_stage(stage)


class OverfitResult:
    """Outcome of an overfitting run on a few fixed clips."""

    def __init__(self, baseline_mad: float, final_mad: float, losses: List[float]):
        self.baseline_mad = baseline_mad
        self.final_mad = final_mad
        self.losses = losses

    def smoothed_losses(self, window: int = 10) -> np.ndarray:
        losses = np.asarray(self.losses, dtype=np.float64)
        if len(losses) < window:
            return losses
        return np.convolve(losses, np.ones(window) / window, mode="valid")


def training_set_mad(model: MattingNetwork, clips: Sequence[ClipSample]) -> float:
    """Unscaled mean |α − α*| over the clips, inference mode."""
    was_training = model.training
    model.eval()
    try:
        errors = []
        for clip in clips:
            output, _ = model.forward(Tensor(clip.frames[None]))
            errors.append(float(np.mean(np.abs(output.alpha.numpy()[0] - clip.alpha_gt))))
    finally:
        model.train(was_training)
    return float(np.mean(errors))


def overfit_smoke(
    model_config: Optional[ModelConfig] = None,
    clips: int = 4,
    steps: int = 200,
    seed: int = 0,
    learning_rate: float = 2e-3,
    length: int = 4,
    resolution: int = 64,
    checkpoint_dir: Optional[Path] = None,
    checkpoint_every: int = 50,
) -> OverfitResult:
    """
    Train a model on a few fixed synthetic clips and report training-set alpha MAD.

    Clips are visited round-robin, one clip per step, with the matting loss
    only. A non-finite loss raises DivergenceError naming the last checkpoint
    written to ``checkpoint_dir``.
    """
    config = model_config or ModelConfig.tiny_test()
    model = build_model(config, seed=seed)
    data = [synth_matting_clip(derive_seed(seed, 7, i), length, resolution, resolution) for i in range(clips)]
    optimizer = Adam.for_model(model, {"backbone": learning_rate, "decoder": learning_rate, "dgf": learning_rate})
    baseline = training_set_mad(model, data)
    logger.info("overfit_started", clips=clips, steps=steps, baseline_mad=baseline)

    losses: List[float] = []
    last_good: Optional[str] = None
    model.train()
    for step in range(steps):
        clip = data[step % clips]
        frames = Tensor(clip.frames[None])
        optimizer.zero_grad()
        with GradTape() as tape:
            output, _ = model.forward(frames)
            loss, _ = matting_loss(output.alpha, output.foreground, clip.alpha_gt[None], clip.fg_gt[None])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"overfit loss became {value} at step {step}", last_good_checkpoint=last_good)
            tape.backward(loss)
        optimizer.step()
        losses.append(value)
        if checkpoint_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            path = Path(checkpoint_dir) / "overfit.ckpt"
            save_checkpoint(model, optimizer, StageCursor(stage=1, iteration=step + 1), path)
            last_good = str(path)

    final = training_set_mad(model, data)
    logger.info("overfit_finished", steps=steps, baseline_mad=baseline, final_mad=final)
    return OverfitResult(baseline, final, losses)


def build_training_service(
    run_config: TrainingRunConfig,
    resume: Optional[Path] = None,
    log_path: Optional[Path] = None,
) -> Tuple[TrainingService, Optional[StageCursor]]:
    """Model, storage and service for a run config; optionally resumed from a checkpoint."""
    model = build_model(ModelConfig.parse(run_config.model), seed=run_config.seed)
    storage = ModelStorage(Path(run_config.output_dir) / "checkpoints")
    service = TrainingService(
        model,
        run_config,
        SyntheticClipSource(seed=run_config.seed),
        storage,
        log_path or Path(run_config.output_dir) / "train_log.jsonl",
    )
    cursor = service.resume(resume) if resume else None
    return service, cursor
